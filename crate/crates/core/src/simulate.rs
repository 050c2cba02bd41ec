//! Synthetic data from the t random-effects model, outlier injection,
//! contamination (breakdown) experiments and the null weight-law study.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`. Replicate `r`
//! of grid cell `c` in an experiment uses stream `(c << 32) | r` of the same
//! seed, so replicates are independent of each other and of thread
//! scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{detect_outliers, StudyFlag};
use crate::error::{MetaError, Result};
use crate::fit::{fit_nmeta_auto, fit_tmeta_auto, ModelKind};
use crate::model::{mahalanobis_all, Dataset, FitOptions, Nu, Study};
use crate::specfun::{beta_reg, f_cdf, Probability};

/// How within-study variances are assigned to simulated studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum S2Law {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_studies: usize,
    pub mu_true: f64,
    pub sigma2_true: f64,
    /// `"inf"` selects the normal generator.
    pub nu_true: Nu,
    pub s2_law: S2Law,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MetaError::InvalidConfig(m));
        if self.n_studies == 0 {
            return bad("n_studies must be at least 1".into());
        }
        if !self.mu_true.is_finite() {
            return bad("mu_true must be finite".into());
        }
        if !(self.sigma2_true.is_finite() && self.sigma2_true >= 0.0) {
            return bad(format!("sigma2_true = {} must be >= 0", self.sigma2_true));
        }
        if let Nu::Finite(nu) = self.nu_true {
            if !(nu.is_finite() && nu > 0.0) {
                return bad(format!("nu_true = {nu} must be > 0"));
            }
        }
        match &self.s2_law {
            S2Law::Fixed { value } if !(value.is_finite() && *value > 0.0) => {
                bad(format!("fixed s2 = {value} must be > 0"))
            }
            S2Law::Uniform { lo, hi }
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && hi >= lo) =>
            {
                bad(format!(
                    "uniform s2 law needs 0 < lo <= hi, got [{lo}, {hi}]"
                ))
            }
            S2Law::Explicit { values } if values.len() != self.n_studies => bad(format!(
                "explicit s2 list has {} values for {} studies",
                values.len(),
                self.n_studies
            )),
            S2Law::Explicit { values } if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
                bad("explicit s2 values must be > 0".into())
            }
            _ => Ok(()),
        }
    }

    /// Standard deviation of a study with the median variance under the
    /// generator, `sqrt(sigma2 + s2)`, used to scale contamination.
    pub fn typical_total_sd(&self) -> f64 {
        let s2 = match &self.s2_law {
            S2Law::Fixed { value } => *value,
            S2Law::Uniform { lo, hi } => 0.5 * (lo + hi),
            S2Law::Explicit { values } => values.iter().sum::<f64>() / values.len() as f64,
        };
        (self.sigma2_true + s2).sqrt()
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_s2(law: &S2Law, i: usize, rng: &mut ChaCha8Rng) -> f64 {
    match law {
        S2Law::Fixed { value } => *value,
        S2Law::Uniform { lo, hi } => {
            if lo == hi {
                *lo
            } else {
                rng.random_range(*lo..*hi)
            }
        }
        S2Law::Explicit { values } => values[i],
    }
}

/// Draw one study from the latent hierarchy:
/// `tau ~ Gamma(nu/2, rate nu/2)`, `b | tau ~ N(0, sigma2/tau)`,
/// `e | tau ~ N(0, s2/tau)`, `y = mu + b + e`.
fn draw_y(config: &SimConfig, s2: f64, gamma: Option<&Gamma<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let tau = gamma.map_or(1.0, |g| g.sample(rng));
    let z_b: f64 = StandardNormal.sample(rng);
    let z_e: f64 = StandardNormal.sample(rng);
    config.mu_true + z_b * (config.sigma2_true / tau).sqrt() + z_e * (s2 / tau).sqrt()
}

fn latent_gamma(nu: Nu) -> Result<Option<Gamma<f64>>> {
    match nu {
        Nu::Infinite => Ok(None),
        Nu::Finite(nu) => Gamma::new(0.5 * nu, 2.0 / nu)
            .map(Some)
            .map_err(|e| MetaError::InvalidConfig(format!("gamma law: {e}"))),
    }
}

fn sample_with(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    config.validate()?;
    let gamma = latent_gamma(config.nu_true)?;
    let studies = (0..config.n_studies)
        .map(|i| {
            let s2 = draw_s2(&config.s2_law, i, rng);
            let y = draw_y(config, s2, gamma.as_ref(), rng);
            Study::new((i + 1).to_string(), y, s2)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("sim-{}", config.seed), studies)
}

/// Draw a dataset; fully determined by `config`.
pub fn sample_dataset(config: &SimConfig) -> Result<Dataset> {
    sample_with(config, &mut rng_for(config.seed, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ContaminationMode {
    /// `y ~ Uniform(lo, hi)`.
    UniformShift { lo: f64, hi: f64 },
    /// `y = value` exactly.
    PointMass { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    #[serde(flatten)]
    pub mode: ContaminationMode,
    pub s2_out: f64,
    pub count: usize,
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.s2_out.is_finite() && self.s2_out > 0.0) {
            return Err(MetaError::InvalidConfig(format!(
                "s2_out = {} must be > 0",
                self.s2_out
            )));
        }
        if let ContaminationMode::UniformShift { lo, hi } = self.mode {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(MetaError::InvalidConfig(format!(
                    "bad interval [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Next free id: one past the largest numeric id, or `N + 1` when the ids
/// are not all integers.
fn next_id(data: &Dataset) -> u64 {
    let numeric: Option<Vec<u64>> = data.studies.iter().map(|s| s.id.parse().ok()).collect();
    match numeric {
        Some(ids) => ids.into_iter().max().map_or(1, |m| m + 1),
        None => data.len() as u64 + 1,
    }
}

/// Return a copy of `data` with `spec.count` studies appended.
pub fn inject_outliers(data: &Dataset, spec: &ContaminationSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_for(seed, 0);
    let mut out = data.clone();
    let first = next_id(data);
    for k in 0..spec.count {
        let y = match spec.mode {
            ContaminationMode::UniformShift { lo, hi } if lo < hi => rng.random_range(lo..hi),
            ContaminationMode::UniformShift { lo, .. } => lo,
            ContaminationMode::PointMass { value } => value,
        };
        out.studies
            .push(Study::new((first + k as u64).to_string(), y, spec.s2_out)?);
    }
    if spec.count > 0 {
        if let Some(cov) = &mut out.covariates {
            let width = cov.ncols();
            cov.rows.extend((0..spec.count).map(|_| vec![0.0; width]));
        }
    }
    out.validate()?;
    Ok(out)
}

/// Return a copy of `data` with study `id`'s within-study variance replaced.
pub fn set_study_s2(data: &Dataset, id: &str, s2: f64) -> Result<Dataset> {
    let mut out = data.clone();
    let study = out
        .studies
        .iter_mut()
        .find(|s| s.id == id)
        .ok_or_else(|| MetaError::InvalidConfig(format!("no study with id {id}")))?;
    study.s2 = s2;
    study.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub fraction: f64,
    pub magnitude: f64,
    pub replicate: usize,
    pub n_contaminated: usize,
    pub model: ModelKind,
    pub mu_hat: f64,
    pub abs_bias: f64,
    pub nu_hat: Nu,
    pub converged: bool,
}

/// For every `(fraction, magnitude)` cell and replicate: draw `N` studies
/// from `base`, shift `round(fraction * N)` of them by `magnitude`, fit the
/// t and normal models and record `|mu_hat - mu_true|`.
///
/// Rows are ordered by fraction, magnitude, replicate, then model.
pub fn breakdown_experiment(
    base: &SimConfig,
    magnitudes: &[f64],
    fractions: &[f64],
    replicates: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<Vec<BreakdownRow>> {
    base.validate()?;
    if let Some(f) = fractions.iter().find(|f| !(0.0..=0.6).contains(*f)) {
        return Err(MetaError::InvalidConfig(format!(
            "fraction {f} outside [0, 0.6]"
        )));
    }
    if let Some(m) = magnitudes.iter().find(|m| !m.is_finite()) {
        return Err(MetaError::InvalidConfig(format!(
            "magnitude {m} is not finite"
        )));
    }
    let cells: Vec<(usize, f64, f64, usize)> = fractions
        .iter()
        .flat_map(|&f| magnitudes.iter().map(move |&m| (f, m)))
        .enumerate()
        .flat_map(|(c, (f, m))| (0..replicates).map(move |r| (c, f, m, r)))
        .collect();

    let blocks = cells
        .par_iter()
        .map(|&(cell, fraction, magnitude, replicate)| {
            let mut rng = rng_for(seed, ((cell as u64) << 32) | replicate as u64);
            let mut data = sample_with(base, &mut rng)?;
            let n_bad = (fraction * base.n_studies as f64).round() as usize;
            for s in data.studies.iter_mut().take(n_bad) {
                s.y += magnitude;
            }
            let fits = [
                (ModelKind::T, fit_tmeta_auto(&data, options)?),
                (ModelKind::Normal, fit_nmeta_auto(&data, options)?),
            ];
            Ok(fits
                .into_iter()
                .map(|(model, f)| {
                    let mu_hat = f.theta.mu().expect("scalar location");
                    BreakdownRow {
                        fraction,
                        magnitude,
                        replicate,
                        n_contaminated: n_bad,
                        model,
                        mu_hat,
                        abs_bias: (mu_hat - base.mu_true).abs(),
                        nu_hat: f.theta.nu,
                        converged: f.converged,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks.into_iter().flatten().collect())
}

/// One-sample Kolmogorov–Smirnov result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided KS statistic `sup |F_n - F|` of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x)?;
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample adjustment
/// `lambda = (sqrt(n) + 0.12 + 0.11 / sqrt(n)) * d`.
pub fn ks_p_value(statistic: f64, n: usize) -> f64 {
    let rn = (n as f64).sqrt();
    let lambda = (rn + 0.12 + 0.11 / rn) * statistic;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> Result<f64>) -> Result<KsResult> {
    let statistic = ks_statistic(sample, cdf)?;
    Ok(KsResult {
        statistic,
        p_value: ks_p_value(statistic, sample.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullWeightSummary {
    pub n_studies: usize,
    pub mu_hat: f64,
    pub sigma2_hat: f64,
    pub nu_hat: Nu,
    /// Scaled weights `tau_i / (1 + 1/nu_hat)` against `Beta(nu_hat/2, 1/2)`.
    pub ks_weights: Option<KsResult>,
    /// Distances `delta2_i` against `F(1, nu_hat)`.
    pub ks_distances: Option<KsResult>,
    pub alpha: Probability,
    pub flag_rate: f64,
    /// Set when the fit degenerated to the normal model.
    pub notice: Option<String>,
}

/// Fit the t model to one simulated dataset without outliers and compare the
/// fitted weights and distances with their asymptotic laws.
pub fn null_weight_study(
    config: &SimConfig,
    alpha: Probability,
    options: &FitOptions,
) -> Result<NullWeightSummary> {
    let data = sample_dataset(config)?;
    let fit = fit_tmeta_auto(&data, options)?;
    let report = detect_outliers(&data, &fit, alpha)?;
    let flagged = report
        .studies
        .iter()
        .filter(|s| s.flag == StudyFlag::Outlier)
        .count();
    let flag_rate = flagged as f64 / data.len() as f64;

    let (ks_weights, ks_distances, notice) = match fit.theta.nu {
        Nu::Infinite => (
            None,
            None,
            Some(
                "nu_hat is infinite: all weights equal 1 and the weight law is degenerate"
                    .to_string(),
            ),
        ),
        Nu::Finite(nu) => {
            let scaled: Vec<f64> = fit.weights.iter().map(|w| w / (1.0 + 1.0 / nu)).collect();
            let delta2 = mahalanobis_all(&data, &fit.theta)?;
            (
                Some(ks_test(&scaled, |x| {
                    beta_reg(0.5 * nu, 0.5, x.clamp(0.0, 1.0))
                })?),
                Some(ks_test(&delta2, |x| f_cdf(x, 1.0, nu))?),
                None,
            )
        }
    };
    Ok(NullWeightSummary {
        n_studies: data.len(),
        mu_hat: fit.theta.mu().expect("scalar location"),
        sigma2_hat: fit.theta.sigma2,
        nu_hat: fit.theta.nu,
        ks_weights,
        ks_distances,
        alpha,
        flag_rate,
        notice,
    })
}
