//! Robust random-effects meta-analysis with Student-t marginals.
//!
//! Effect sizes `y_i` with known within-study variances `s2_i` are modelled
//! as `y_i ~ t(mu, sigma2 + s2_i, nu)`, fitted by ECME. The fitted latent
//! weights both down-weight and flag outlying studies.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod report;
pub mod selection;
pub mod simulate;
pub mod specfun;

pub use diagnostics::{detect_outliers, OutlierReport, StudyFlag};
pub use error::{MetaError, Result};
pub use fit::{
    fit_nmeta, fit_nmeta_auto, fit_tmeta, fit_tmeta_auto, fit_tmeta_regression,
    fit_tmeta_regression_auto, FitResult, ModelKind,
};
pub use io::{load_csv, write_csv};
pub use model::{Dataset, FitOptions, Location, Nu, Study, Theta};
pub use selection::{bic, compare_models, ComparisonRow};
pub use specfun::Probability;
