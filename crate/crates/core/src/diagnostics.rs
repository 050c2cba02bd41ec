//! Outlier detection from the fitted latent weights.
//!
//! A study is flagged when its weight falls strictly below
//! `(1 + 1/nu) * B_alpha(nu/2, 1/2)`, the `alpha` quantile of the asymptotic
//! weight law. For an infinite `nu` the rule is evaluated at `nu_max`, with
//! the weights recomputed at that `nu`; this reduces to the normal-theory cut
//! `delta2_i > chi2_1(1 - alpha)`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fit::FitResult;
use crate::model::{mahalanobis_all, Dataset, Nu, Theta};
use crate::specfun::{beta_quantile, Probability};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyFlag {
    Normal,
    Outlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDiagnostic {
    pub id: String,
    pub tau_tilde: f64,
    pub inv_tau: f64,
    pub u: f64,
    pub u_tau: f64,
    pub mahalanobis_sq: f64,
    pub flag: StudyFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub studies: Vec<StudyDiagnostic>,
    pub critical_tau: f64,
    pub inv_critical_tau: f64,
    pub alpha: Probability,
    /// Mean of `u_i * tau_i`.
    pub identity_mean: f64,
    pub sigma2_was_zero: bool,
}

impl OutlierReport {
    pub fn outlier_ids(&self) -> Vec<&str> {
        self.studies
            .iter()
            .filter(|s| s.flag == StudyFlag::Outlier)
            .map(|s| s.id.as_str())
            .collect()
    }
}

/// `u_i = N / (sigma2 + s2_i) / sum_j 1 / (sigma2 + s2_j)`.
pub fn study_u_weights(data: &Dataset, theta_hat: &Theta) -> Vec<f64> {
    let inv: Vec<f64> = data
        .studies
        .iter()
        .map(|s| 1.0 / (theta_hat.sigma2 + s.s2))
        .collect();
    let total: f64 = inv.iter().sum();
    let n = data.len() as f64;
    inv.iter().map(|v| n * v / total).collect()
}

/// `(1/N) sum_i u_i tau_i`: 1 at an interior ML estimate, at least 1 when
/// the between-study variance sits on its zero bound.
pub fn check_prop2_identity(weights: &[f64], u: &[f64], _sigma2_hat: f64) -> f64 {
    let n = weights.len() as f64;
    weights.iter().zip(u).map(|(w, u)| w * u).sum::<f64>() / n
}

/// Critical weight `(1 + 1/nu) * B_alpha(nu/2, 1/2)`.
pub fn critical_weight(nu_hat: f64, alpha: Probability) -> Result<f64> {
    Ok((1.0 + 1.0 / nu_hat) * beta_quantile(alpha, 0.5 * nu_hat, 0.5)?)
}

/// Classify every study of a fitted model at level `alpha`.
pub fn detect_outliers(
    data: &Dataset,
    fit: &FitResult,
    alpha: Probability,
) -> Result<OutlierReport> {
    let theta = &fit.theta;
    let delta2 = mahalanobis_all(data, theta)?;
    let nu_for_rule = theta.nu.value_or(fit.options.nu_max);
    let critical_tau = critical_weight(nu_for_rule, alpha)?;
    let rule_weights: Vec<f64> = match theta.nu {
        Nu::Finite(_) => fit.weights.clone(),
        Nu::Infinite => delta2
            .iter()
            .map(|d| (nu_for_rule + 1.0) / (nu_for_rule + d))
            .collect(),
    };
    let u = study_u_weights(data, theta);
    let identity_mean = check_prop2_identity(&fit.weights, &u, theta.sigma2);

    let studies = data
        .studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tau = fit.weights[i];
            StudyDiagnostic {
                id: s.id.clone(),
                tau_tilde: tau,
                inv_tau: 1.0 / tau,
                u: u[i],
                u_tau: u[i] * tau,
                mahalanobis_sq: delta2[i],
                flag: if rule_weights[i] < critical_tau {
                    StudyFlag::Outlier
                } else {
                    StudyFlag::Normal
                },
            }
        })
        .collect();

    Ok(OutlierReport {
        studies,
        critical_tau,
        inv_critical_tau: 1.0 / critical_tau,
        alpha,
        identity_mean,
        sigma2_was_zero: theta.sigma2 == 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::ModelKind;
    use crate::model::FitOptions;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn alpha(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    #[test]
    fn u_weights_examples() {
        let d = Dataset::from_slices("eq", &[0.1, 0.2, 0.3], &[0.4, 0.4, 0.4]).unwrap();
        let u = study_u_weights(&d, &Theta::new(0.0, 0.3, Nu::Infinite));
        for v in &u {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-15);
        }
        let d = Dataset::from_slices("two", &[0.0, 0.0], &[1.0, 3.0]).unwrap();
        let u = study_u_weights(&d, &Theta::new(0.0, 0.0, Nu::Infinite));
        assert_abs_diff_eq!(u[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(u.iter().sum::<f64>(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_trivial_case() {
        assert_eq!(check_prop2_identity(&[1.0, 1.0], &[1.0, 1.0], 0.5), 1.0);
    }

    #[test]
    fn cauchy_critical_weight() {
        let expect = 2.0 * (0.05 * PI / 2.0).sin().powi(2);
        assert_abs_diff_eq!(expect, 0.012_311_7, epsilon = 1e-7);
        assert_abs_diff_eq!(
            critical_weight(1.0, alpha(0.05)).unwrap(),
            expect,
            epsilon = 1e-10
        );
    }

    #[test]
    fn critical_weight_upper_limit() {
        let nu = 3.0;
        let near_one = critical_weight(nu, alpha(1.0 - 1e-6)).unwrap();
        assert!((near_one - (1.0 + 1.0 / nu)).abs() < 1e-6);
    }

    fn fit_with(theta: Theta, weights: Vec<f64>) -> FitResult {
        FitResult {
            model_kind: ModelKind::T,
            theta,
            weights,
            loglik_trace: vec![0.0],
            iterations: 1,
            converged: true,
            options: FitOptions::default(),
        }
    }

    #[test]
    fn threshold_is_strict() {
        let d = Dataset::from_slices("x", &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let c = critical_weight(2.0, alpha(0.05)).unwrap();
        let fit = fit_with(Theta::new(0.0, 0.0, Nu::Finite(2.0)), vec![c, c * 0.999]);
        let report = detect_outliers(&d, &fit, alpha(0.05)).unwrap();
        assert_eq!(report.studies[0].flag, StudyFlag::Normal);
        assert_eq!(report.studies[1].flag, StudyFlag::Outlier);
        assert_eq!(report.outlier_ids(), vec!["2"]);
        assert_abs_diff_eq!(
            report.inv_critical_tau * report.critical_tau,
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn infinite_nu_uses_normal_theory_cut() {
        // delta2 = 9 exceeds chi2_1(0.95) = 3.84; delta2 = 1 does not
        let d = Dataset::from_slices("x", &[3.0, 1.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        let fit = fit_with(Theta::new(0.0, 0.0, Nu::Infinite), vec![1.0; 3]);
        let report = detect_outliers(&d, &fit, alpha(0.05)).unwrap();
        assert_eq!(report.outlier_ids(), vec!["1"]);
        assert!(report.studies.iter().all(|s| s.tau_tilde == 1.0));
        assert!(report.sigma2_was_zero);
    }
}
