//! Model comparison by negative log-likelihood and BIC.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fit::{fit_nmeta_auto, fit_tmeta_auto, fit_tmeta_regression_auto, FitResult, ModelKind};
use crate::model::{Covariates, Dataset, FitOptions, Location, Nu};

/// `2 * neg_loglik + n_params * ln(n_studies)`.
pub fn bic(neg_loglik: f64, n_params: usize, n_studies: usize) -> f64 {
    2.0 * neg_loglik + n_params as f64 * (n_studies as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_kind: ModelKind,
    pub location: Option<Location>,
    pub sigma: Option<f64>,
    pub nu: Option<Nu>,
    pub neg_loglik: Option<f64>,
    pub bic: Option<f64>,
    pub n_params: usize,
    pub converged: bool,
    pub wall_time_ms: f64,
    /// Set when the fit failed; the numeric fields are then empty.
    pub error: Option<String>,
}

impl ComparisonRow {
    fn from_fit(
        kind: ModelKind,
        n_params: usize,
        fit: Result<FitResult>,
        n: usize,
        ms: f64,
    ) -> Self {
        match fit {
            Ok(f) => Self {
                model_kind: kind,
                location: Some(f.theta.location.clone()),
                sigma: Some(f.sigma()),
                nu: Some(f.theta.nu),
                neg_loglik: Some(f.neg_loglik()),
                bic: Some(bic(f.neg_loglik(), f.n_params(), n)),
                n_params: f.n_params(),
                converged: f.converged,
                wall_time_ms: ms,
                error: None,
            },
            Err(e) => Self {
                model_kind: kind,
                location: None,
                sigma: None,
                nu: None,
                neg_loglik: None,
                bic: None,
                n_params,
                converged: false,
                wall_time_ms: ms,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Prepend an intercept column unless the covariates already contain a
/// constant column.
pub fn with_intercept(covariates: &Covariates) -> Covariates {
    let has_constant = (0..covariates.ncols()).any(|j| {
        let first = covariates.rows.first().map(|r| r[j]);
        first.is_some_and(|v| v != 0.0 && covariates.rows.iter().all(|r| r[j] == v))
    });
    if has_constant {
        return covariates.clone();
    }
    let mut names = vec!["intercept".to_string()];
    names.extend(covariates.names.iter().cloned());
    let rows = covariates
        .rows
        .iter()
        .map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect())
        .collect();
    Covariates { names, rows }
}

/// Fit the normal and t models (plus the t regression when covariates are
/// present) and return the rows sorted by BIC, failed fits last.
pub fn compare_models(data: &Dataset, options: &FitOptions) -> Result<Vec<ComparisonRow>> {
    let n = data.len();
    let mut jobs: Vec<(ModelKind, usize)> = vec![(ModelKind::Normal, 2), (ModelKind::T, 3)];
    let regression_data = match &data.covariates {
        Some(cov) => {
            let design = with_intercept(cov);
            jobs.push((ModelKind::TRegression, design.ncols() + 2));
            let mut d = data.clone();
            d.covariates = Some(design);
            Some(d)
        }
        None => None,
    };

    let mut rows: Vec<ComparisonRow> = jobs
        .par_iter()
        .map(|&(kind, k)| {
            let start = Instant::now();
            let fit = match kind {
                ModelKind::Normal => fit_nmeta_auto(data, options),
                ModelKind::T => fit_tmeta_auto(data, options),
                ModelKind::TRegression => fit_tmeta_regression_auto(
                    regression_data.as_ref().expect("covariates"),
                    options,
                ),
            };
            let ms = start.elapsed().as_secs_f64() * 1e3;
            ComparisonRow::from_fit(kind, k, fit, n, ms)
        })
        .collect();

    rows.sort_by(|a, b| match (a.bic, b.bic) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(rows)
}
