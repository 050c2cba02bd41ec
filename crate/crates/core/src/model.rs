//! Studies, datasets, parameters and the two observed-data log-likelihoods.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{domain, MetaError, Result};
use crate::specfun::{normal_logpdf_unchecked, student_t_logpdf_unchecked};

/// Finite degrees of freedom above this are treated as infinite.
pub const NU_MAX: f64 = 1e6;
/// Lower bound on the degrees of freedom.
pub const NU_MIN: f64 = 1.0;

/// One observed effect size with its known within-study variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub y: f64,
    pub s2: f64,
}

impl Study {
    pub fn new(id: impl Into<String>, y: f64, s2: f64) -> Result<Self> {
        let study = Self {
            id: id.into(),
            y,
            s2,
        };
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.y.is_finite() {
            return Err(MetaError::InvalidStudy {
                id: self.id.clone(),
                reason: format!("effect size y = {} is not finite", self.y),
            });
        }
        if !(self.s2.is_finite() && self.s2 > 0.0) {
            return Err(MetaError::InvalidStudy {
                id: self.id.clone(),
                reason: format!(
                    "within-study variance s2 = {} must be finite and > 0",
                    self.s2
                ),
            });
        }
        Ok(())
    }
}

/// Row-major covariate (design) matrix aligned with the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn ncols(&self) -> usize {
        self.names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub studies: Vec<Study>,
    pub covariates: Option<Covariates>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, studies: Vec<Study>) -> Result<Self> {
        let data = Self {
            name: name.into(),
            studies,
            covariates: None,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn with_covariates(mut self, covariates: Covariates) -> Result<Self> {
        self.covariates = Some(covariates);
        self.validate()?;
        Ok(self)
    }

    /// Build from parallel slices, numbering the studies `1..=N`.
    pub fn from_slices(name: impl Into<String>, y: &[f64], s2: &[f64]) -> Result<Self> {
        if y.len() != s2.len() {
            return Err(MetaError::InvalidDataset(format!(
                "{} effect sizes but {} variances",
                y.len(),
                s2.len()
            )));
        }
        let studies = y
            .iter()
            .zip(s2)
            .enumerate()
            .map(|(i, (&y, &s2))| Study::new((i + 1).to_string(), y, s2))
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, studies)
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.y).collect()
    }

    pub fn s2s(&self) -> Vec<f64> {
        self.studies.iter().map(|s| s.s2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.studies {
            s.validate()?;
        }
        if let Some(cov) = &self.covariates {
            if cov.rows.len() != self.studies.len() {
                return Err(MetaError::InvalidDataset(format!(
                    "{} covariate rows for {} studies",
                    cov.rows.len(),
                    self.studies.len()
                )));
            }
            if let Some(bad) = cov.rows.iter().position(|r| r.len() != cov.ncols()) {
                return Err(MetaError::InvalidDataset(format!(
                    "covariate row for study {} has {} values, expected {}",
                    self.studies[bad].id,
                    cov.rows[bad].len(),
                    cov.ncols()
                )));
            }
            if cov.rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(MetaError::InvalidDataset(
                    "non-finite covariate value".into(),
                ));
            }
        }
        Ok(())
    }

    /// Checks the sample-size requirement for fitting: `N >= 2`, or
    /// `N >= p + 2` when fitting a regression with `p` columns.
    pub fn check_fittable(&self, with_covariates: bool) -> Result<()> {
        self.validate()?;
        let needed = match (&self.covariates, with_covariates) {
            (Some(cov), true) => cov.ncols() + 2,
            (None, true) => {
                return Err(MetaError::InvalidDataset(
                    "meta-regression requires covariates".into(),
                ))
            }
            _ => 2,
        };
        if self.len() < needed {
            return Err(MetaError::InvalidDataset(format!(
                "{} studies, at least {needed} required",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Degrees of freedom, possibly infinite (the normal limit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nu {
    Finite(f64),
    Infinite,
}

impl Nu {
    pub fn is_infinite(self) -> bool {
        matches!(self, Nu::Infinite)
    }

    /// The finite value, or `cap` when infinite.
    pub fn value_or(self, cap: f64) -> f64 {
        match self {
            Nu::Finite(v) => v,
            Nu::Infinite => cap,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.value_or(f64::INFINITY)
    }
}

impl fmt::Display for Nu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nu::Finite(v) => write!(f, "{v}"),
            Nu::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Nu {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Nu::Finite(v) => serializer.serialize_f64(*v),
            Nu::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Nu {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(v) if v.is_infinite() && v > 0.0 => Ok(Nu::Infinite),
            Raw::Number(v) => Ok(Nu::Finite(v)),
            Raw::Text(s) if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinite") => {
                Ok(Nu::Infinite)
            }
            Raw::Text(s) => Err(serde::de::Error::custom(format!("invalid nu {s:?}"))),
        }
    }
}

/// Overall effect `mu`, or regression coefficients `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Mean(f64),
    Coefficients(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub location: Location,
    pub sigma2: f64,
    pub nu: Nu,
}

impl Theta {
    pub fn new(mu: f64, sigma2: f64, nu: Nu) -> Self {
        Self {
            location: Location::Mean(mu),
            sigma2,
            nu,
        }
    }

    pub fn regression(beta: Vec<f64>, sigma2: f64, nu: Nu) -> Self {
        Self {
            location: Location::Coefficients(beta),
            sigma2,
            nu,
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match self.location {
            Location::Mean(mu) => Some(mu),
            Location::Coefficients(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(domain(
                "Theta",
                format!("sigma2 = {} must be >= 0", self.sigma2),
            ));
        }
        if let Nu::Finite(nu) = self.nu {
            if !(nu.is_finite() && nu >= NU_MIN) {
                return Err(domain("Theta", format!("nu = {nu} must be >= {NU_MIN}")));
            }
        }
        let finite = match &self.location {
            Location::Mean(mu) => mu.is_finite(),
            Location::Coefficients(beta) => beta.iter().all(|b| b.is_finite()),
        };
        if !finite {
            return Err(domain("Theta", "non-finite location"));
        }
        Ok(())
    }

    /// Location of study `i`: `mu`, or `x_i' beta`.
    pub fn center(&self, data: &Dataset, i: usize) -> Result<f64> {
        match &self.location {
            Location::Mean(mu) => Ok(*mu),
            Location::Coefficients(beta) => {
                let cov = data.covariates.as_ref().ok_or_else(|| {
                    MetaError::InvalidDataset("regression parameters need covariates".into())
                })?;
                if beta.len() != cov.ncols() {
                    return Err(MetaError::InvalidDataset(format!(
                        "{} coefficients for {} covariate columns",
                        beta.len(),
                        cov.ncols()
                    )));
                }
                Ok(cov.rows[i].iter().zip(beta).map(|(x, b)| x * b).sum())
            }
        }
    }

    pub fn centers(&self, data: &Dataset) -> Result<Vec<f64>> {
        (0..data.len()).map(|i| self.center(data, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Threshold on the relative change of the log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
    /// Degrees of freedom above this are reported as infinite.
    pub nu_max: f64,
    pub nu_min: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            nu_max: NU_MAX,
            nu_min: NU_MIN,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(MetaError::InvalidConfig(format!(
                "tol = {} must be > 0",
                self.tol
            )));
        }
        if self.max_iter < 1 {
            return Err(MetaError::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.nu_min >= 1.0 && self.nu_min < self.nu_max && self.nu_max.is_finite()) {
            return Err(MetaError::InvalidConfig(format!(
                "need 1 <= nu_min < nu_max < inf, got nu_min = {}, nu_max = {}",
                self.nu_min, self.nu_max
            )));
        }
        Ok(())
    }
}

/// Squared Mahalanobis distance `(y - center)^2 / (sigma2 + s2)`.
pub fn mahalanobis_sq(study: &Study, center: f64, sigma2: f64) -> f64 {
    let r = study.y - center;
    r * r / (sigma2 + study.s2)
}

/// Squared Mahalanobis distances of every study under `theta`.
pub fn mahalanobis_all(data: &Dataset, theta: &Theta) -> Result<Vec<f64>> {
    data.studies
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(mahalanobis_sq(s, theta.center(data, i)?, theta.sigma2)))
        .collect()
}

fn check_scales(data: &Dataset, sigma2: f64) -> Result<()> {
    if let Some(s) = data.studies.iter().find(|s| !(sigma2 + s.s2 > 0.0)) {
        return Err(domain(
            "loglik",
            format!("sigma2 + s2 = {} <= 0 for study {}", sigma2 + s.s2, s.id),
        ));
    }
    Ok(())
}

/// Observed-data log-likelihood of the t model: the sum of the exact
/// `t(center_i, sigma2 + s2_i, nu)` log densities. An infinite `nu` gives
/// the normal log-likelihood.
pub fn loglik_t(data: &Dataset, theta: &Theta) -> Result<f64> {
    let nu = match theta.nu {
        Nu::Infinite => return loglik_normal(data, theta),
        Nu::Finite(nu) if nu > 0.0 && nu.is_finite() => nu,
        Nu::Finite(nu) => return Err(domain("loglik_t", format!("nu = {nu} must be > 0"))),
    };
    check_scales(data, theta.sigma2)?;
    let mut total = 0.0;
    for (i, s) in data.studies.iter().enumerate() {
        total += student_t_logpdf_unchecked(s.y, theta.center(data, i)?, theta.sigma2 + s.s2, nu);
    }
    Ok(total)
}

/// Observed-data log-likelihood of the normal model,
/// `sum_i -1/2 [ln 2 pi + ln(sigma2 + s2_i) + delta2_i]`.
pub fn loglik_normal(data: &Dataset, theta: &Theta) -> Result<f64> {
    check_scales(data, theta.sigma2)?;
    let mut total = 0.0;
    for (i, s) in data.studies.iter().enumerate() {
        total += normal_logpdf_unchecked(s.y, theta.center(data, i)?, theta.sigma2 + s.s2);
    }
    Ok(total)
}
