//! Maximum-likelihood fitting: the ECME algorithm for the t model, the normal
//! baseline, and the meta-regression variant.
//!
//! One sweep is
//!
//! 1. E-step: `tau_i = (nu + 1) / (nu + delta2_i)`;
//! 2. CM-step 1: weighted mean (or weighted least squares for regression);
//! 3. CM-step 2: one fixed-point step for `sigma2`, clamped at zero;
//! 4. CM-step 3: `nu` maximizing the observed log-likelihood, by bisection
//!    on its score.
//!
//! The normal model is the same loop with all weights pinned at 1 and no
//! `nu` step. Once step 4 reports an infinite `nu` the weights freeze at 1
//! and the remaining sweeps are normal-model sweeps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};
use crate::model::{loglik_t, mahalanobis_all, Dataset, FitOptions, Location, Nu, Theta};
use crate::specfun::{digamma_minus_ln_unchecked, ln_beta_unchecked};

const NU_START: f64 = 10.0;
const NU_BISECTION_TOL: f64 = 1e-6;
const NU_BISECTION_MAX_HALVINGS: usize = 200;
const SIGMA2_MAX_HALVINGS: usize = 60;
const LN_SQRT_PI: f64 = 0.572_364_942_924_700_1;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Relative rank tolerance on the singular values of the design matrix.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "t")]
    T,
    #[serde(rename = "t-regression")]
    TRegression,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Normal => "normal",
            ModelKind::T => "t",
            ModelKind::TRegression => "t-regression",
        }
    }

    /// Display name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Normal => "nMeta",
            ModelKind::T => "tMeta",
            ModelKind::TRegression => "tMeta-regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model_kind: ModelKind,
    pub theta: Theta,
    /// Expected latent weights at the final parameters.
    pub weights: Vec<f64>,
    /// Log-likelihood at the starting point followed by one value per sweep.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub options: FitOptions,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace holds the starting value")
    }

    pub fn neg_loglik(&self) -> f64 {
        -self.loglik()
    }

    pub fn sigma(&self) -> f64 {
        self.theta.sigma2.sqrt()
    }

    /// Free parameters: location (1 or p), `sigma2`, and `nu` for t models.
    pub fn n_params(&self) -> usize {
        let location = match &self.theta.location {
            Location::Mean(_) => 1,
            Location::Coefficients(beta) => beta.len(),
        };
        match self.model_kind {
            ModelKind::Normal => location + 1,
            ModelKind::T | ModelKind::TRegression => location + 2,
        }
    }
}

/// E-step: `tau_i = (nu + 1) / (nu + delta2_i)`; all ones for infinite `nu`.
pub fn e_step_weights(data: &Dataset, theta: &Theta) -> Result<Vec<f64>> {
    let delta2 = mahalanobis_all(data, theta)?;
    Ok(weights_from_distances(&delta2, theta.nu))
}

fn weights_from_distances(delta2: &[f64], nu: Nu) -> Vec<f64> {
    match nu {
        Nu::Infinite => vec![1.0; delta2.len()],
        Nu::Finite(nu) => delta2.iter().map(|d| (nu + 1.0) / (nu + d)).collect(),
    }
}

/// CM-step 1: `mu = sum(tau y / V) / sum(tau / V)` with `V = sigma2 + s2`.
pub fn cm_update_mu(data: &Dataset, weights: &[f64], theta: &Theta) -> Result<f64> {
    check_weights(data, weights)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, w) in data.studies.iter().zip(weights) {
        let v = theta.sigma2 + s.s2;
        num += w * s.y / v;
        den += w / v;
    }
    if !(den > 0.0) {
        return Err(MetaError::InvalidDataset(
            "weighted mean has a zero denominator".into(),
        ));
    }
    Ok(num / den)
}

/// CM-step 1 for meta-regression: weighted least squares with weights
/// `tau_i / (sigma2 + s2_i)`.
pub fn cm_update_beta(data: &Dataset, weights: &[f64], theta: &Theta) -> Result<Vec<f64>> {
    check_weights(data, weights)?;
    let design = design_matrix(data)?;
    let w: Vec<f64> = data
        .studies
        .iter()
        .zip(weights)
        .map(|(s, t)| t / (theta.sigma2 + s.s2))
        .collect();
    weighted_least_squares(&design, &data.ys(), &w)
}

/// CM-step 2 for a scalar location.
pub fn cm_update_sigma2(
    data: &Dataset,
    weights: &[f64],
    mu_new: f64,
    theta: &Theta,
) -> Result<f64> {
    check_weights(data, weights)?;
    let centers = vec![mu_new; data.len()];
    Ok(sigma2_fixed_point(data, weights, &centers, theta.sigma2))
}

/// One evaluation of
/// `sigma2_t = sum[(tau r^2 - s2) / V^2] / sum[1 / V^2]`, `V = sigma2 + s2`,
/// clamped at zero.
fn sigma2_fixed_point(data: &Dataset, weights: &[f64], centers: &[f64], sigma2: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((s, w), c) in data.studies.iter().zip(weights).zip(centers) {
        let v = sigma2 + s.s2;
        let r = s.y - c;
        num += (w * r * r - s.s2) / (v * v);
        den += 1.0 / (v * v);
    }
    (num / den).max(0.0)
}

/// Expected complete-data objective in `sigma2`, up to a constant.
fn q1(data: &Dataset, weights: &[f64], centers: &[f64], sigma2: f64) -> f64 {
    let mut total = 0.0;
    for ((s, w), c) in data.studies.iter().zip(weights).zip(centers) {
        let v = sigma2 + s.s2;
        let r = s.y - c;
        total += v.ln() + w * r * r / v;
    }
    -0.5 * total
}

/// CM-step 2 with a step-halving guard: if the fixed-point step lowers the
/// expected complete-data objective, the step is halved toward the current
/// value until it does not.
fn sigma2_step(data: &Dataset, weights: &[f64], centers: &[f64], sigma2: f64) -> f64 {
    let proposal = sigma2_fixed_point(data, weights, centers, sigma2);
    let base = q1(data, weights, centers, sigma2);
    let mut candidate = proposal;
    for _ in 0..SIGMA2_MAX_HALVINGS {
        if q1(data, weights, centers, candidate) >= base {
            return candidate;
        }
        candidate = 0.5 * (candidate + sigma2);
    }
    sigma2
}

/// `e - ln(1 + e)`, accurate for small `e`.
fn excess_over_log1p(e: f64) -> f64 {
    if e.abs() < 1e-4 {
        // e^2/2 - e^3/3 + e^4/4
        e * e * (0.5 - e * (1.0 / 3.0 - 0.25 * e))
    } else {
        e - e.ln_1p()
    }
}

/// The `nu` score used by CM-step 3:
///
/// `-psi(nu/2) + ln(nu/2) + 1 + psi((nu+1)/2) - ln((nu+1)/2)
///  + mean_i [ln w_i - w_i]`, with `w_i = (nu + 1) / (nu + delta2_i)`.
///
/// This equals `(2 / N) dL/d nu` at fixed location and `sigma2`.
pub fn nu_score(delta2: &[f64], nu: f64) -> f64 {
    let gap = digamma_minus_ln_unchecked(0.5 * (nu + 1.0)) - digamma_minus_ln_unchecked(0.5 * nu);
    // ln w - w + 1 = -(e - ln(1 + e)) with e = w - 1
    let data_term = delta2
        .iter()
        .map(|d| -excess_over_log1p((1.0 - d) / (nu + d)))
        .sum::<f64>()
        / delta2.len() as f64;
    gap + data_term
}

/// Observed log-likelihood as a function of `nu` alone, omitting the
/// `-1/2 sum ln(sigma2 + s2_i)` term that does not depend on `nu`.
pub fn nu_profile_loglik(delta2: &[f64], nu: Nu) -> f64 {
    let n = delta2.len() as f64;
    match nu {
        Nu::Infinite => -0.5 * n * LN_2PI - 0.5 * delta2.iter().sum::<f64>(),
        Nu::Finite(nu) => {
            let gamma_ratio = LN_SQRT_PI - ln_beta_unchecked(0.5 * nu, 0.5);
            let kernel: f64 = delta2.iter().map(|d| (d / nu).ln_1p()).sum();
            n * (gamma_ratio - 0.5 * (std::f64::consts::PI * nu).ln()) - 0.5 * (nu + 1.0) * kernel
        }
    }
}

/// CM-step 3: the root of [`nu_score`] on `[nu_min, nu_max]` by bisection.
///
/// A positive score at `nu_max` gives [`Nu::Infinite`]; a negative score at
/// `nu_min` gives `nu_min`. When both hold the endpoint with the higher
/// likelihood wins.
pub fn cm_update_nu(data: &Dataset, theta_new: &Theta, options: &FitOptions) -> Result<Nu> {
    let delta2 = mahalanobis_all(data, theta_new)?;
    solve_nu(&delta2, options)
}

pub(crate) fn solve_nu(delta2: &[f64], options: &FitOptions) -> Result<Nu> {
    let score_lo = nu_score(delta2, options.nu_min);
    let score_hi = nu_score(delta2, options.nu_max);
    let floor = score_lo < 0.0;
    let infinite = score_hi > 0.0;
    match (floor, infinite) {
        (true, true) => {
            let at_floor = nu_profile_loglik(delta2, Nu::Finite(options.nu_min));
            let at_inf = nu_profile_loglik(delta2, Nu::Infinite);
            Ok(if at_inf >= at_floor {
                Nu::Infinite
            } else {
                Nu::Finite(options.nu_min)
            })
        }
        (false, true) => Ok(Nu::Infinite),
        (true, false) => Ok(Nu::Finite(options.nu_min)),
        (false, false) => {
            if score_lo == 0.0 {
                return Ok(Nu::Finite(options.nu_min));
            }
            let (mut lo, mut hi) = (options.nu_min, options.nu_max);
            for _ in 0..NU_BISECTION_MAX_HALVINGS {
                if hi - lo <= NU_BISECTION_TOL {
                    return Ok(Nu::Finite(0.5 * (lo + hi)));
                }
                let mid = 0.5 * (lo + hi);
                if nu_score(delta2, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Err(MetaError::NonConvergence {
                routine: "nu bisection",
                iterations: NU_BISECTION_MAX_HALVINGS,
            })
        }
    }
}

fn check_weights(data: &Dataset, weights: &[f64]) -> Result<()> {
    if weights.len() != data.len() {
        return Err(MetaError::InvalidDataset(format!(
            "{} weights for {} studies",
            weights.len(),
            data.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(MetaError::InvalidDataset("weights must be positive".into()));
    }
    Ok(())
}

pub(crate) fn design_matrix(data: &Dataset) -> Result<DMatrix<f64>> {
    let cov = data
        .covariates
        .as_ref()
        .ok_or_else(|| MetaError::InvalidDataset("meta-regression requires covariates".into()))?;
    Ok(DMatrix::from_fn(data.len(), cov.ncols(), |i, j| {
        cov.rows[i][j]
    }))
}

fn check_full_rank(design: &DMatrix<f64>) -> Result<()> {
    let columns = design.ncols();
    if columns == 0 {
        return Err(MetaError::RankDeficient { rank: 0, columns });
    }
    let sv = design.clone().svd(false, false).singular_values;
    let largest = sv.max();
    let rank = sv.iter().filter(|s| **s > RANK_TOL * largest).count();
    if rank < columns || largest == 0.0 {
        return Err(MetaError::RankDeficient { rank, columns });
    }
    Ok(())
}

fn weighted_least_squares(design: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let p = design.ncols();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..design.nrows() {
        let row = design.row(i);
        for a in 0..p {
            xtwy[a] += w[i] * row[a] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += w[i] * row[a] * row[b];
            }
        }
    }
    let chol = xtwx.cholesky().ok_or(MetaError::RankDeficient {
        rank: p.saturating_sub(1),
        columns: p,
    })?;
    Ok(chol.solve(&xtwy).iter().copied().collect())
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Starting point: inverse-variance weighted mean, moment estimate of
/// `sigma2` and `nu = 10`.
pub fn initial_theta(data: &Dataset) -> Theta {
    let ys = data.ys();
    let s2 = data.s2s();
    let (num, den) = ys
        .iter()
        .zip(&s2)
        .fold((0.0, 0.0), |(n, d), (y, v)| (n + y / v, d + 1.0 / v));
    let mean_s2 = s2.iter().sum::<f64>() / s2.len() as f64;
    let sigma2 = (sample_variance(&ys) - mean_s2).max(0.0);
    Theta::new(num / den, sigma2, Nu::Finite(NU_START))
}

/// Deterministic set of starting points tried by the `*_auto` fitters.
///
/// The first is [`initial_theta`]; the others centre on the median, with the
/// spread taken from the sample variance and from the median absolute
/// deviation, which stays small in the presence of gross outliers.
pub fn starting_points(data: &Dataset) -> Vec<Theta> {
    let ys = data.ys();
    let s2 = data.s2s();
    let med = median(&ys);
    let med_s2 = median(&s2);
    let mad =
        1.482_602_218_505_602 * median(&ys.iter().map(|y| (y - med).abs()).collect::<Vec<_>>());
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = sample_variance(&ys);
    vec![
        initial_theta(data),
        Theta::new(med, (var - med_s2).max(0.0), Nu::Finite(NU_START)),
        Theta::new(med, (mad * mad - med_s2).max(0.0), Nu::Finite(NU_START)),
        Theta::new(mean, (var - med_s2).max(0.0), Nu::Finite(NU_START)),
    ]
}

/// Regression starting points: weighted (`1 / s2`) and ordinary least
/// squares, each with the residual moment estimate of `sigma2`.
pub fn regression_starting_points(data: &Dataset) -> Result<Vec<Theta>> {
    let design = design_matrix(data)?;
    check_full_rank(&design)?;
    let ys = data.ys();
    let s2 = data.s2s();
    let mean_s2 = s2.iter().sum::<f64>() / s2.len() as f64;
    let ivw: Vec<f64> = s2.iter().map(|v| 1.0 / v).collect();
    let ones = vec![1.0; data.len()];
    let mut starts = Vec::new();
    for w in [&ivw, &ones] {
        let beta = weighted_least_squares(&design, &ys, w)?;
        let resid: Vec<f64> = (0..data.len())
            .map(|i| {
                ys[i]
                    - design
                        .row(i)
                        .iter()
                        .zip(&beta)
                        .map(|(x, b)| x * b)
                        .sum::<f64>()
            })
            .collect();
        let spread = sample_variance(&resid);
        starts.push(Theta::regression(
            beta,
            (spread - mean_s2).max(0.0),
            Nu::Finite(NU_START),
        ));
    }
    Ok(starts)
}

fn has_converged(previous: f64, current: f64, tol: f64) -> bool {
    if current.abs() >= 1.0 {
        (1.0 - previous / current).abs() < tol
    } else {
        (current - previous).abs() < tol * (1.0 + current.abs())
    }
}

struct Ecme<'a> {
    data: &'a Dataset,
    options: FitOptions,
    kind: ModelKind,
    design: Option<DMatrix<f64>>,
}

impl<'a> Ecme<'a> {
    fn new(data: &'a Dataset, options: FitOptions, kind: ModelKind) -> Result<Self> {
        options.validate()?;
        let regression = kind == ModelKind::TRegression;
        data.check_fittable(regression)?;
        let design = if regression {
            let design = design_matrix(data)?;
            check_full_rank(&design)?;
            Some(design)
        } else {
            None
        };
        Ok(Self {
            data,
            options,
            kind,
            design,
        })
    }

    fn centers(&self, location: &Location) -> Vec<f64> {
        match (location, &self.design) {
            (Location::Mean(mu), _) => vec![*mu; self.data.len()],
            (Location::Coefficients(beta), Some(design)) => (0..design.nrows())
                .map(|i| design.row(i).iter().zip(beta).map(|(x, b)| x * b).sum())
                .collect(),
            (Location::Coefficients(_), None) => unreachable!("checked in prepare"),
        }
    }

    fn prepare(&self, init: &Theta) -> Result<Theta> {
        init.validate()?;
        let mut theta = init.clone();
        match (&theta.location, self.kind) {
            (Location::Coefficients(beta), ModelKind::TRegression) => {
                let p = self.design.as_ref().map_or(0, |d| d.ncols());
                if beta.len() != p {
                    return Err(MetaError::InvalidConfig(format!(
                        "initial beta has {} entries for {p} design columns",
                        beta.len()
                    )));
                }
            }
            (Location::Mean(_), ModelKind::Normal | ModelKind::T) => {}
            (Location::Mean(_), ModelKind::TRegression) => {
                return Err(MetaError::InvalidConfig(
                    "meta-regression needs an initial coefficient vector".into(),
                ))
            }
            (Location::Coefficients(_), _) => {
                return Err(MetaError::InvalidConfig(
                    "coefficient vector given to a scalar-location fit".into(),
                ))
            }
        }
        if self.kind == ModelKind::Normal {
            theta.nu = Nu::Infinite;
        } else if let Nu::Finite(nu) = theta.nu {
            theta.nu = Nu::Finite(nu.clamp(self.options.nu_min, self.options.nu_max));
        }
        Ok(theta)
    }

    fn distances(&self, centers: &[f64], sigma2: f64) -> Vec<f64> {
        self.data
            .studies
            .iter()
            .zip(centers)
            .map(|(s, c)| (s.y - c) * (s.y - c) / (sigma2 + s.s2))
            .collect()
    }

    fn location_step(&self, weights: &[f64], theta: &Theta) -> Result<Location> {
        match &self.design {
            None => Ok(Location::Mean(cm_update_mu(self.data, weights, theta)?)),
            Some(design) => {
                let w: Vec<f64> = self
                    .data
                    .studies
                    .iter()
                    .zip(weights)
                    .map(|(s, t)| t / (theta.sigma2 + s.s2))
                    .collect();
                Ok(Location::Coefficients(weighted_least_squares(
                    design,
                    &self.data.ys(),
                    &w,
                )?))
            }
        }
    }

    fn run(&self, init: &Theta) -> Result<FitResult> {
        let mut theta = self.prepare(init)?;
        let mut previous = loglik_t(self.data, &theta)?;
        let mut trace = vec![previous];
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.options.max_iter {
            iterations += 1;

            let centers = self.centers(&theta.location);
            let delta2 = self.distances(&centers, theta.sigma2);
            let weights = weights_from_distances(&delta2, theta.nu);

            let location = self.location_step(&weights, &theta)?;
            let centers = self.centers(&location);
            let sigma2 = sigma2_step(self.data, &weights, &centers, theta.sigma2);
            theta.location = location;
            theta.sigma2 = sigma2;

            if let Nu::Finite(_) = theta.nu {
                let delta2 = self.distances(&centers, sigma2);
                let proposal = solve_nu(&delta2, &self.options)?;
                if nu_profile_loglik(&delta2, proposal) >= nu_profile_loglik(&delta2, theta.nu) {
                    theta.nu = proposal;
                }
            }

            let current = loglik_t(self.data, &theta)?;
            trace.push(current);
            if has_converged(previous, current, self.options.tol) {
                converged = true;
                break;
            }
            previous = current;
        }

        let centers = self.centers(&theta.location);
        let weights = weights_from_distances(&self.distances(&centers, theta.sigma2), theta.nu);
        Ok(FitResult {
            model_kind: self.kind,
            theta,
            weights,
            loglik_trace: trace,
            iterations,
            converged,
            options: self.options,
        })
    }
}

/// ECME fit of the t model from `init`.
pub fn fit_tmeta(data: &Dataset, init: &Theta, options: &FitOptions) -> Result<FitResult> {
    Ecme::new(data, *options, ModelKind::T)?.run(init)
}

/// ML fit of the normal model from `init` (its `nu` is ignored).
pub fn fit_nmeta(data: &Dataset, init: &Theta, options: &FitOptions) -> Result<FitResult> {
    Ecme::new(data, *options, ModelKind::Normal)?.run(init)
}

/// ECME fit of the t meta-regression `y_i = x_i' beta + b_i + e_i`, using
/// the dataset's covariates as the design matrix.
pub fn fit_tmeta_regression(
    data: &Dataset,
    init: &Theta,
    options: &FitOptions,
) -> Result<FitResult> {
    Ecme::new(data, *options, ModelKind::TRegression)?.run(init)
}

fn best_of(fits: Vec<Result<FitResult>>) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                let better = best.as_ref().is_none_or(|b| f.loglik() > b.loglik());
                if better {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start"))
}

/// [`fit_tmeta`] from every point of [`starting_points`], keeping the fit
/// with the highest final log-likelihood.
pub fn fit_tmeta_auto(data: &Dataset, options: &FitOptions) -> Result<FitResult> {
    let engine = Ecme::new(data, *options, ModelKind::T)?;
    best_of(
        starting_points(data)
            .iter()
            .map(|s| engine.run(s))
            .collect(),
    )
}

/// [`fit_nmeta`] from every point of [`starting_points`].
pub fn fit_nmeta_auto(data: &Dataset, options: &FitOptions) -> Result<FitResult> {
    let engine = Ecme::new(data, *options, ModelKind::Normal)?;
    best_of(
        starting_points(data)
            .iter()
            .map(|s| engine.run(s))
            .collect(),
    )
}

/// [`fit_tmeta_regression`] from every point of
/// [`regression_starting_points`].
pub fn fit_tmeta_regression_auto(data: &Dataset, options: &FitOptions) -> Result<FitResult> {
    let engine = Ecme::new(data, *options, ModelKind::TRegression)?;
    best_of(
        regression_starting_points(data)?
            .iter()
            .map(|s| engine.run(s))
            .collect(),
    )
}
