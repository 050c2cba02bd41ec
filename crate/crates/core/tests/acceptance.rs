//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed regardless of
//! output capture; exits non-zero when any criterion fails. Dataset fixtures
//! other than `mag.csv` are read from `$ROBUSTMETA_FIXTURES` (or the crate's
//! `fixtures/`) and a criterion that needs a missing fixture fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{
    central_diff, fixture, fixture_dir, grid_max_loglik, latent_marginal_logpdf, t_loglik_reference,
};
use robustmeta::diagnostics::{check_prop2_identity, detect_outliers, study_u_weights};
use robustmeta::fit::{fit_nmeta_auto, fit_tmeta_auto, FitResult};
use robustmeta::io::load_csv;
use robustmeta::model::{Dataset, FitOptions, Nu};
use robustmeta::selection::bic;
use robustmeta::simulate::{
    inject_outliers, null_weight_study, sample_dataset, set_study_s2, ContaminationMode,
    ContaminationSpec, S2Law, SimConfig,
};
use robustmeta::specfun::{student_t_logpdf, Probability};

type Outcome = Result<String, String>;
type DatasetSource = fn() -> Result<Dataset, String>;
type Criterion = (&'static str, fn() -> Outcome);

const MODIFIED_FLU_SEED: u64 = 71;

fn alpha() -> Probability {
    Probability::new(0.05).unwrap()
}

fn load(name: &str) -> Result<Dataset, String> {
    let path = fixture(name)
        .ok_or_else(|| format!("fixture {name} not found in {}", fixture_dir().display()))?;
    load_csv(&path).map_err(|e| format!("{name}: {e}"))
}

fn modified_flu() -> Result<Dataset, String> {
    if let Ok(d) = load("flu_modified.csv") {
        return Ok(d);
    }
    let flu = load("flu.csv")?;
    let spec = ContaminationSpec {
        mode: ContaminationMode::UniformShift { lo: 1.0, hi: 2.0 },
        s2_out: 1.0 / 12.0,
        count: 1,
    };
    inject_outliers(&flu, &spec, MODIFIED_FLU_SEED).map_err(|e| e.to_string())
}

fn modified_cdp() -> Result<Dataset, String> {
    if let Ok(d) = load("cdp_modified.csv") {
        return Ok(d);
    }
    let cdp = load("cdp.csv")?;
    let spec = ContaminationSpec {
        mode: ContaminationMode::PointMass { value: 60.0 },
        s2_out: 0.25,
        count: 1,
    };
    let out = inject_outliers(&cdp, &spec, 0).map_err(|e| e.to_string())?;
    set_study_s2(&out, "8", 0.01).map_err(|e| e.to_string())
}

fn tmeta(d: &Dataset) -> Result<FitResult, String> {
    fit_tmeta_auto(d, &FitOptions::default()).map_err(|e| e.to_string())
}

fn nmeta(d: &Dataset) -> Result<FitResult, String> {
    fit_nmeta_auto(d, &FitOptions::default()).map_err(|e| e.to_string())
}

/// Collects mismatches instead of stopping at the first.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn near(&mut self, label: &str, got: f64, want: f64, tol: f64) {
        self.notes.push(format!("{label}={got:.4}"));
        // written so that a NaN estimate fails
        if !((got - want).abs() <= tol) {
            self.failures
                .push(format!("{label} = {got:.5}, expected {want} ± {tol}"));
        }
    }

    fn truth(&mut self, label: &str, ok: bool) {
        if !ok {
            self.failures.push(label.to_string());
        }
    }

    fn nu(&mut self, label: &str, nu: Nu, want: f64, tol: f64) {
        match nu {
            Nu::Finite(v) => self.near(label, v, want, tol),
            Nu::Infinite => self
                .failures
                .push(format!("{label} = inf, expected {want} ± {tol}")),
        }
    }

    fn finish(self) -> Outcome {
        if self.failures.is_empty() {
            Ok(self.notes.join(", "))
        } else {
            Err(self.failures.join("; "))
        }
    }
}

fn outlier_set(d: &Dataset, fit: &FitResult) -> Result<Vec<String>, String> {
    let report = detect_outliers(d, fit, alpha()).map_err(|e| e.to_string())?;
    let mut ids: Vec<String> = report.outlier_ids().into_iter().map(String::from).collect();
    ids.sort_by_key(|id| id.parse::<u64>().unwrap_or(u64::MAX));
    Ok(ids)
}

fn criterion_1() -> Outcome {
    let d = load("mag.csv")?;
    let start = Instant::now();
    let n = nmeta(&d)?;
    let t = tmeta(&d)?;
    let elapsed = start.elapsed();
    let mut c = Checks::default();
    for (label, f) in [("nMeta", &n), ("tMeta", &t)] {
        c.near(&format!("{label} mu"), f.theta.mu().unwrap(), -0.746, 0.005);
        c.near(&format!("{label} sigma"), f.sigma(), 0.504, 0.005);
        c.near(&format!("{label} -L"), f.neg_loglik(), 19.685, 0.01);
    }
    c.truth("tMeta nu should be inf", t.theta.nu.is_infinite());
    c.truth(
        &format!("runtime {elapsed:?} exceeds 1 s"),
        elapsed.as_secs_f64() < 1.0,
    );
    c.notes.push(format!(
        "nu={}, {:.1} ms",
        t.theta.nu,
        elapsed.as_secs_f64() * 1e3
    ));
    c.finish()
}

fn criterion_2() -> Outcome {
    let d = load("hipfrac.csv")?;
    let t = tmeta(&d)?;
    let n = nmeta(&d)?;
    let mut c = Checks::default();
    c.near("tMeta mu", t.theta.mu().unwrap(), 1.252, 0.005);
    c.near("tMeta sigma", t.sigma(), 0.0, 0.005);
    c.nu("tMeta nu", t.theta.nu, 1.871, 0.02);
    c.near("tMeta -L", t.neg_loglik(), 3.700, 0.02);
    c.near("tMeta BIC", bic(t.neg_loglik(), 3, d.len()), 15.899, 0.05);
    c.near("nMeta -L", n.neg_loglik(), 8.498, 0.01);
    c.near("nMeta BIC", bic(n.neg_loglik(), 2, d.len()), 22.661, 0.05);
    c.finish()
}

fn criterion_3() -> Outcome {
    let d = load("flu.csv")?;
    let t = tmeta(&d)?;
    let mut c = Checks::default();
    c.near("tMeta mu", t.theta.mu().unwrap(), -0.282, 0.005);
    c.near("tMeta sigma", t.sigma(), 0.051, 0.01);
    c.nu("tMeta nu", t.theta.nu, 2.754, 0.05);
    c.near("tMeta BIC", bic(t.neg_loglik(), 3, d.len()), -23.820, 0.1);
    let m = modified_flu()?;
    let tm = tmeta(&m)?;
    c.near("modified mu", tm.theta.mu().unwrap(), -0.281, 0.01);
    c.nu("modified nu", tm.theta.nu, 2.367, 0.5);
    let set = outlier_set(&m, &tm)?;
    c.truth(
        &format!("modified Flu outliers {set:?} != [38, 50, 63, 71]"),
        set == ["38", "50", "63", "71"],
    );
    c.finish()
}

fn criterion_4() -> Outcome {
    let d = load("cdp.csv")?;
    let t = tmeta(&d)?;
    let mut c = Checks::default();
    c.near("tMeta mu", t.theta.mu().unwrap(), 0.187, 0.005);
    c.nu("tMeta nu", t.theta.nu, 2.380, 0.05);
    c.near("tMeta BIC", bic(t.neg_loglik(), 3, d.len()), 13.662, 0.05);
    let m = modified_cdp()?;
    let tm = tmeta(&m)?;
    c.near("modified mu", tm.theta.mu().unwrap(), 0.200, 0.01);
    c.near("modified sigma", tm.sigma(), 0.115, 0.02);
    c.nu("modified nu", tm.theta.nu, 1.000, 0.01);
    c.near(
        "modified BIC",
        bic(tm.neg_loglik(), 3, m.len()),
        41.355,
        0.1,
    );
    c.finish()
}

fn criterion_5() -> Outcome {
    let cases: [(&str, DatasetSource, &[&str]); 6] = [
        ("Mag", || load("mag.csv"), &[]),
        ("Hipfrac", || load("hipfrac.csv"), &["17"]),
        ("Flu", || load("flu.csv"), &["38", "50", "63"]),
        ("modified Flu", modified_flu, &["38", "50", "63", "71"]),
        ("CDP", || load("cdp.csv"), &["8"]),
        ("modified CDP", modified_cdp, &["8", "11"]),
    ];
    let mut c = Checks::default();
    for (label, data, expected) in cases {
        match data().and_then(|d| tmeta(&d).and_then(|f| outlier_set(&d, &f))) {
            Ok(set) => {
                c.notes.push(format!("{label} {set:?}"));
                c.truth(
                    &format!("{label}: {set:?} != {expected:?}"),
                    set == expected,
                );
            }
            Err(e) => c.failures.push(format!("{label}: {e}")),
        }
    }
    c.finish()
}

/// Available real datasets (bundled or supplied) plus their modified forms.
fn real_datasets() -> Vec<(String, Dataset)> {
    let mut out = Vec::new();
    for name in ["mag.csv", "hipfrac.csv", "flu.csv", "cdp.csv"] {
        if let Ok(d) = load(name) {
            out.push((name.to_string(), d));
        }
    }
    if let Ok(d) = modified_flu() {
        out.push(("flu_modified".into(), d));
    }
    if let Ok(d) = modified_cdp() {
        out.push(("cdp_modified".into(), d));
    }
    out
}

fn synthetic_datasets(count: u64) -> Vec<(String, Dataset)> {
    (0..count)
        .map(|k| {
            let config = SimConfig {
                n_studies: 10 + (k as usize % 4) * 10,
                mu_true: 0.5 * (k % 3) as f64 - 0.5,
                sigma2_true: [0.0, 0.05, 0.2, 0.5][k as usize % 4],
                nu_true: if k % 5 == 0 {
                    Nu::Infinite
                } else {
                    Nu::Finite(1.5 + (k % 7) as f64)
                },
                s2_law: S2Law::Uniform { lo: 0.02, hi: 0.4 },
                seed: 500 + k,
            };
            (
                format!("synthetic seed {}", config.seed),
                sample_dataset(&config).unwrap(),
            )
        })
        .collect()
}

/// Options for the stationarity and identity checks: the default stopping
/// rule halts once the relative change of L drops below 1e-8, which leaves
/// gradients of order 1e-4 on slowly converging fits.
fn tight() -> FitOptions {
    FitOptions {
        tol: 1e-15,
        max_iter: 100_000,
        ..FitOptions::default()
    }
}

fn gradient_failures(label: &str, d: &Dataset, fit: &FitResult) -> Vec<String> {
    let mut out = Vec::new();
    let y = d.ys();
    let s2 = d.s2s();
    let mu = fit.theta.mu().unwrap();
    let sigma2 = fit.theta.sigma2;
    let Nu::Finite(nu) = fit.theta.nu else {
        // normal limit: reference log-likelihood uses the normal density
        let ll = |m: f64, v: f64| -> f64 {
            y.iter()
                .zip(&s2)
                .map(|(y, s)| {
                    -0.5 * ((2.0 * std::f64::consts::PI * (v + s)).ln() + (y - m).powi(2) / (v + s))
                })
                .sum()
        };
        let g_mu = central_diff(|m| ll(m, sigma2), mu, 1e-6);
        if g_mu.abs() > 1e-5 {
            out.push(format!("{label}: dL/dmu = {g_mu:.2e}"));
        }
        if sigma2 > 1e-6 {
            let g = central_diff(|v| ll(mu, v), sigma2, 1e-7);
            if g.abs() > 1e-5 {
                out.push(format!("{label}: dL/dsigma2 = {g:.2e}"));
            }
        }
        return out;
    };
    let ll = |m: f64, v: f64, n: f64| t_loglik_reference(&y, &s2, m, v, n);
    let g_mu = central_diff(|m| ll(m, sigma2, nu), mu, 1e-6);
    if g_mu.abs() > 1e-5 {
        out.push(format!("{label}: dL/dmu = {g_mu:.2e}"));
    }
    if sigma2 > 1e-6 {
        let g = central_diff(|v| ll(mu, v, nu), sigma2, 1e-7);
        if g.abs() > 1e-5 {
            out.push(format!("{label}: dL/dsigma2 = {g:.2e}"));
        }
    }
    let g_nu = central_diff(|n| ll(mu, sigma2, n), nu, 1e-6 * nu);
    if g_nu > 1e-5 {
        out.push(format!("{label}: dL/dnu = {g_nu:.2e} at nu = {nu}"));
    }
    out
}

fn criterion_6() -> Outcome {
    let mut c = Checks::default();
    let mut datasets = real_datasets();
    let real = datasets.len();
    datasets.extend(synthetic_datasets(100));
    let mut steps = 0usize;
    let mut stationary = 0usize;
    for (label, d) in &datasets {
        for (kind, fit) in [("t", tmeta(d)?), ("normal", nmeta(d)?)] {
            for w in fit.loglik_trace.windows(2) {
                steps += 1;
                if w[1] < w[0] - 1e-10 {
                    c.failures
                        .push(format!("{label} ({kind}): L fell {:.3e}", w[0] - w[1]));
                    break;
                }
            }
        }
        let fit = fit_tmeta_auto(d, &tight()).map_err(|e| e.to_string())?;
        if fit.converged {
            stationary += 1;
            c.failures.extend(gradient_failures(label, d, &fit));
        } else {
            c.failures
                .push(format!("{label}: tight fit did not converge"));
        }
    }
    c.notes.push(format!(
        "{real} real + 100 synthetic datasets, {steps} ascent steps, {stationary} stationarity checks"
    ));
    if real < 6 {
        c.failures.push(format!(
            "only {real} of 6 real datasets available in {}",
            fixture_dir().display()
        ));
    }
    c.finish()
}

fn criterion_7() -> Outcome {
    let mut c = Checks::default();
    let mut datasets = real_datasets();
    let real = datasets.len();
    datasets.extend(synthetic_datasets(100));
    let (mut interior, mut boundary) = (0, 0);
    let (mut worst, mut worst_default) = (0.0_f64, 0.0_f64);
    let identity = |d: &Dataset, fit: &FitResult| {
        let u = study_u_weights(d, &fit.theta);
        check_prop2_identity(&fit.weights, &u, fit.theta.sigma2)
    };
    for (label, d) in &datasets {
        let fit = fit_tmeta_auto(d, &tight()).map_err(|e| e.to_string())?;
        if !fit.converged {
            c.failures
                .push(format!("{label}: tight fit did not converge"));
            continue;
        }
        let mean = identity(d, &fit);
        if fit.theta.sigma2 > 0.0 {
            interior += 1;
            worst = worst.max((mean - 1.0).abs());
            worst_default = worst_default.max((identity(d, &tmeta(d)?) - 1.0).abs());
            c.truth(
                &format!("{label}: mean(u tau) = {mean:.9} with sigma2 > 0"),
                (mean - 1.0).abs() <= 1e-6,
            );
        } else {
            boundary += 1;
            c.truth(
                &format!("{label}: mean(u tau) = {mean:.9} < 1 with sigma2 = 0"),
                mean >= 1.0 - 1e-6,
            );
        }
    }
    c.notes.push(format!(
        "{interior} interior fits (max |dev| {worst:.1e}; {worst_default:.1e} at the default tolerance), {boundary} boundary fits"
    ));
    if real < 6 {
        c.failures
            .push(format!("only {real} of 6 real datasets available"));
    }
    c.finish()
}

fn criterion_8() -> Outcome {
    let config = SimConfig {
        n_studies: 2000,
        mu_true: 0.0,
        sigma2_true: 0.3,
        nu_true: Nu::Finite(4.0),
        s2_law: S2Law::Uniform { lo: 0.05, hi: 0.5 },
        seed: 8,
    };
    let start = Instant::now();
    let s =
        null_weight_study(&config, alpha(), &FitOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut c = Checks::default();
    let margin = 2.0 * (0.05_f64 * 0.95 / 2000.0).sqrt();
    match (s.ks_weights, s.ks_distances) {
        (Some(w), Some(dist)) => {
            c.notes.push(format!(
                "nu_hat={}, KS p weights {:.3}, distances {:.3}",
                s.nu_hat, w.p_value, dist.p_value
            ));
            c.truth(
                &format!("weight-law KS p = {:.4}", w.p_value),
                w.p_value > 0.01,
            );
            c.truth(
                &format!("distance KS p = {:.4}", dist.p_value),
                dist.p_value > 0.01,
            );
        }
        _ => c.failures.push("fit degenerated to nu = inf".into()),
    }
    c.near("flag rate", s.flag_rate, 0.05, margin.max(0.012));
    c.truth(
        &format!("runtime {elapsed:?} exceeds 30 s"),
        elapsed.as_secs_f64() < 30.0,
    );
    c.finish()
}

fn criterion_9() -> Outcome {
    let mut c = Checks::default();
    let mut worst = f64::INFINITY;
    for k in 0..10u64 {
        let config = SimConfig {
            n_studies: 4 + (k as usize % 3),
            mu_true: 0.2,
            sigma2_true: [0.0, 0.1, 0.4][k as usize % 3],
            nu_true: Nu::Finite(2.0 + k as f64),
            s2_law: S2Law::Uniform { lo: 0.05, hi: 0.5 },
            seed: 900 + k,
        };
        let d = sample_dataset(&config).map_err(|e| e.to_string())?;
        let fit = tmeta(&d)?;
        let grid = grid_max_loglik(&d.ys(), &d.s2s(), 60);
        let gap = fit.loglik() - grid;
        worst = worst.min(gap);
        c.truth(
            &format!(
                "seed {}: ECME {:.6} < grid {:.6} - 1e-4",
                config.seed,
                fit.loglik(),
                grid
            ),
            gap >= -1e-4,
        );
    }
    c.notes.push(format!("min (ECME - grid) = {worst:.2e}"));
    c.finish()
}

fn criterion_10() -> Outcome {
    let mut c = Checks::default();
    let mut worst = 0.0_f64;
    for k in 0..20 {
        let kf = k as f64;
        let y = -3.0 + 0.37 * kf;
        let mu = 0.5 * (kf * 0.7).sin();
        let scale2 = 0.05 + 0.15 * kf;
        let nu = 1.0 + 1.45 * kf;
        let ours = student_t_logpdf(y, mu, scale2, nu).map_err(|e| e.to_string())?;
        let oracle = latent_marginal_logpdf(y, mu, scale2, nu);
        worst = worst.max((ours - oracle).abs());
        c.truth(
            &format!(
                "({y:.2}, {mu:.3}, {scale2:.2}, {nu:.2}): |diff| = {:.2e}",
                (ours - oracle).abs()
            ),
            (ours - oracle).abs() <= 1e-8,
        );
    }
    c.notes.push(format!("20 points, max |diff| = {worst:.1e}"));
    c.finish()
}

fn criterion_11() -> Outcome {
    let mut c = Checks::default();
    let replicates = 100;
    let mut degenerate = 0;
    let mut worst = 0.0_f64;
    let mut max_gain = 0.0_f64;
    for r in 0..replicates {
        let config = SimConfig {
            n_studies: 50,
            mu_true: 0.3,
            sigma2_true: 0.2,
            nu_true: Nu::Infinite,
            s2_law: S2Law::Uniform { lo: 0.05, hi: 0.5 },
            seed: 1100 + r,
        };
        let d = sample_dataset(&config).map_err(|e| e.to_string())?;
        let t = tmeta(&d)?;
        let n = nmeta(&d)?;
        if !matches!(t.theta.nu.as_f64(), v if v > 100.0) {
            max_gain = max_gain.max(t.loglik() - n.loglik());
            continue;
        }
        degenerate += 1;
        let dev = (t.theta.mu().unwrap() - n.theta.mu().unwrap())
            .abs()
            .max((t.theta.sigma2 - n.theta.sigma2).abs());
        worst = worst.max(dev);
        c.truth(
            &format!(
                "seed {}: (mu, sigma2) differ from nMeta by {dev:.2e}",
                config.seed
            ),
            dev <= 1e-3,
        );
    }
    c.notes.push(format!(
        "{degenerate}/{replicates} replicates with nu_hat > 100 or inf, max deviation {worst:.1e}"
    ));
    c.truth(
        &format!("only {degenerate}/{replicates} replicates degenerate"),
        degenerate * 10 >= replicates * 9,
    );
    c.finish()
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("Mag estimates and runtime", criterion_1),
        ("Hipfrac estimates and BIC", criterion_2),
        ("Flu original and modified", criterion_3),
        ("CDP original and modified", criterion_4),
        ("outlier sets at alpha 0.05", criterion_5),
        ("ECME ascent and stationarity", criterion_6),
        ("weight identity mean(u tau)", criterion_7),
        ("null weight and distance laws", criterion_8),
        ("brute-force grid equivalence", criterion_9),
        ("latent-integral quadrature", criterion_10),
        ("normal-data degeneracy", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} PASS  {name} ({secs:.2} s): {detail}",
                i + 1
            ),
            Err(reason) => {
                failed += 1;
                println!(
                    "criterion {:>2} FAIL  {name} ({secs:.2} s): {reason}",
                    i + 1
                );
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
