//! Machine-readable fit reports and plot data.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{OutlierReport, StudyFlag};
use crate::error::Result;
use crate::fit::FitResult;
use crate::model::{Dataset, Location, Nu};
use crate::selection::{bic, ComparisonRow};
use crate::simulate::BreakdownRow;

/// Half-width multiplier of the per-study 95% intervals.
pub const CI_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametersJson {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<f64>>,
    pub sigma: f64,
    pub sigma2: f64,
    pub nu: Nu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyJson {
    pub id: String,
    pub y: f64,
    pub s2: f64,
    pub tau_tilde: f64,
    pub inv_tau: f64,
    pub u: f64,
    pub u_tau: f64,
    pub mahalanobis_sq: f64,
    pub outlier_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalJson {
    pub alpha: f64,
    pub tau_critical: f64,
    pub inv_tau_critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportJson {
    pub model: String,
    pub parameters: ParametersJson,
    pub neg_loglik: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub per_study: Vec<StudyJson>,
    pub critical: CriticalJson,
    pub identity_mean: f64,
}

impl FitReportJson {
    pub fn new(data: &Dataset, fit: &FitResult, outliers: &OutlierReport) -> Self {
        let (mu, beta) = match &fit.theta.location {
            Location::Mean(m) => (Some(*m), None),
            Location::Coefficients(b) => (None, Some(b.clone())),
        };
        let per_study = data
            .studies
            .iter()
            .zip(&outliers.studies)
            .map(|(s, d)| StudyJson {
                id: s.id.clone(),
                y: s.y,
                s2: s.s2,
                tau_tilde: d.tau_tilde,
                inv_tau: d.inv_tau,
                u: d.u,
                u_tau: d.u_tau,
                mahalanobis_sq: d.mahalanobis_sq,
                outlier_flag: d.flag == StudyFlag::Outlier,
            })
            .collect();
        Self {
            model: fit.model_kind.label().to_string(),
            parameters: ParametersJson {
                mu,
                beta,
                sigma: fit.sigma(),
                sigma2: fit.theta.sigma2,
                nu: fit.theta.nu,
            },
            neg_loglik: fit.neg_loglik(),
            bic: bic(fit.neg_loglik(), fit.n_params(), data.len()),
            converged: fit.converged,
            iterations: fit.iterations,
            loglik_trace: fit.loglik_trace.clone(),
            per_study,
            critical: CriticalJson {
                alpha: outliers.alpha.value(),
                tau_critical: outliers.critical_tau,
                inv_tau_critical: outliers.inv_critical_tau,
            },
            identity_mean: outliers.identity_mean,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Long-format flattening with columns `section,id,field,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["section", "id", "field", "value"])?;
        let mut put = |section: &str, id: &str, field: &str, value: String| {
            w.write_record([section, id, field, value.as_str()])
        };
        put("fit", "", "model", self.model.clone())?;
        put("fit", "", "neg_loglik", self.neg_loglik.to_string())?;
        put("fit", "", "bic", self.bic.to_string())?;
        put("fit", "", "converged", self.converged.to_string())?;
        put("fit", "", "iterations", self.iterations.to_string())?;
        put("fit", "", "identity_mean", self.identity_mean.to_string())?;
        let p = &self.parameters;
        if let Some(mu) = p.mu {
            put("parameter", "", "mu", mu.to_string())?;
        }
        for (j, b) in p.beta.iter().flatten().enumerate() {
            put("parameter", &j.to_string(), "beta", b.to_string())?;
        }
        put("parameter", "", "sigma", p.sigma.to_string())?;
        put("parameter", "", "sigma2", p.sigma2.to_string())?;
        put("parameter", "", "nu", p.nu.to_string())?;
        for (t, l) in self.loglik_trace.iter().enumerate() {
            put("trace", &t.to_string(), "loglik", l.to_string())?;
        }
        for s in &self.per_study {
            for (field, value) in [
                ("y", s.y),
                ("s2", s.s2),
                ("tau_tilde", s.tau_tilde),
                ("inv_tau", s.inv_tau),
                ("u", s.u),
                ("u_tau", s.u_tau),
                ("mahalanobis_sq", s.mahalanobis_sq),
            ] {
                put("study", &s.id, field, value.to_string())?;
            }
            put("study", &s.id, "outlier_flag", s.outlier_flag.to_string())?;
        }
        put("critical", "", "alpha", self.critical.alpha.to_string())?;
        put(
            "critical",
            "",
            "tau_critical",
            self.critical.tau_critical.to_string(),
        )?;
        put(
            "critical",
            "",
            "inv_tau_critical",
            self.critical.inv_tau_critical.to_string(),
        )?;
        w.flush()?;
        Ok(())
    }
}

/// `forest.csv`: `id,y,ci_lo,ci_hi` with `y -/+ 1.96 s`.
pub fn write_forest_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "y", "ci_lo", "ci_hi"])?;
    for s in &data.studies {
        let half = CI_Z * s.s2.sqrt();
        w.write_record([
            s.id.clone(),
            s.y.to_string(),
            (s.y - half).to_string(),
            (s.y + half).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `weights.csv`: `id,inv_tau,inv_tau_critical`.
pub fn write_weights_csv<W: Write>(report: &OutlierReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "inv_tau", "inv_tau_critical"])?;
    let line = report.inv_critical_tau.to_string();
    for s in &report.studies {
        w.write_record([s.id.as_str(), &s.inv_tau.to_string(), line.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Two-panel SVG: forest plot on the left, inverse weights with the
/// critical line on the right. Outliers are drawn in red.
pub fn render_svg(data: &Dataset, report: &OutlierReport) -> String {
    const ROW: f64 = 18.0;
    const TOP: f64 = 30.0;
    const PANEL: f64 = 300.0;
    const LABEL: f64 = 50.0;
    let n = data.len();
    let height = TOP * 2.0 + ROW * n as f64;
    let width = 2.0 * (PANEL + LABEL) + 40.0;

    let (lo, hi) = data
        .studies
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            let half = CI_Z * s.s2.sqrt();
            (lo.min(s.y - half), hi.max(s.y + half))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let fx = |v: f64| LABEL + (v - lo) / span * PANEL;
    let w_max = report
        .studies
        .iter()
        .map(|s| s.inv_tau)
        .fold(report.inv_critical_tau, f64::max)
        * 1.05;
    let right = 2.0 * LABEL + PANEL + 20.0;
    let wx = |v: f64| right + v / w_max * PANEL;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{LABEL}" y="16">effect size (95% CI)</text>"#
    );
    let _ = writeln!(svg, r#"<text x="{right}" y="16">1 / weight</text>"#);
    for (i, (s, d)) in data.studies.iter().zip(&report.studies).enumerate() {
        let y = TOP + ROW * (i as f64 + 0.5);
        let colour = if d.flag == StudyFlag::Outlier {
            "#c00"
        } else {
            "#000"
        };
        let half = CI_Z * s.s2.sqrt();
        let id = escape(&s.id);
        let _ = writeln!(svg, r#"<text x="4" y="{:.1}">{id}</text>"#, y + 4.0);
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.1}" x2="{:.2}" y2="{y:.1}" stroke="{colour}"/>"#,
            fx(s.y - half),
            fx(s.y + half)
        );
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{y:.1}" r="3" fill="{colour}"/>"#,
            fx(s.y)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{id}</text>"#,
            right - LABEL + 10.0,
            y + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{right:.2}" y="{:.1}" width="{:.2}" height="{:.1}" fill="{colour}"/>"#,
            y - ROW * 0.35,
            wx(d.inv_tau) - right,
            ROW * 0.7
        );
    }
    let crit = wx(report.inv_critical_tau);
    let _ = writeln!(
        svg,
        r##"<line x1="{crit:.2}" y1="{TOP}" x2="{crit:.2}" y2="{:.1}" stroke="#c00" stroke-dasharray="4 3"/>"##,
        height - TOP
    );
    svg.push_str("</svg>\n");
    svg
}

/// Human-readable comparison table, numbers rounded to 3 decimals.
pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let mut out = format!(
        "{:<18} {:>10} {:>8} {:>8} {:>10} {:>10} {:>10}\n",
        "model", "mu", "sigma", "nu", "neg_loglik", "bic", "time_ms"
    );
    for r in rows {
        let mu = match &r.location {
            Some(Location::Mean(m)) => format!("{m:.3}"),
            Some(Location::Coefficients(b)) => format!(
                "[{}]",
                b.iter()
                    .map(|v| format!("{v:.3}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            None => "-".into(),
        };
        let nu = match r.nu {
            Some(Nu::Finite(v)) => format!("{v:.3}"),
            Some(Nu::Infinite) => "inf".into(),
            None => "-".into(),
        };
        let _ = write!(
            out,
            "{:<18} {:>10} {:>8} {:>8} {:>10} {:>10} {:>10.1}",
            r.model_kind.display_name(),
            mu,
            fmt(r.sigma),
            nu,
            fmt(r.neg_loglik),
            fmt(r.bic),
            r.wall_time_ms
        );
        if let Some(e) = &r.error {
            let _ = write!(out, "  failed: {e}");
        }
        out.push('\n');
    }
    out
}

/// Comparison rows as CSV: `model,mu,sigma,nu,neg_loglik,bic,n_params,converged,wall_time_ms,error`.
/// Regression coefficients are joined with `;` in the `mu` column.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model",
        "mu",
        "sigma",
        "nu",
        "neg_loglik",
        "bic",
        "n_params",
        "converged",
        "wall_time_ms",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mu = match &r.location {
            Some(Location::Mean(m)) => m.to_string(),
            Some(Location::Coefficients(b)) => b
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            None => String::new(),
        };
        w.write_record([
            r.model_kind.label().to_string(),
            mu,
            opt(r.sigma),
            r.nu.map(|n| n.to_string()).unwrap_or_default(),
            opt(r.neg_loglik),
            opt(r.bic),
            r.n_params.to_string(),
            r.converged.to_string(),
            r.wall_time_ms.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format breakdown table, one row per replicate and model.
pub fn write_breakdown_csv<W: Write>(rows: &[BreakdownRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "fraction",
        "magnitude",
        "replicate",
        "n_contaminated",
        "model",
        "mu_hat",
        "abs_bias",
        "nu_hat",
        "converged",
    ])?;
    for r in rows {
        w.write_record([
            r.fraction.to_string(),
            r.magnitude.to_string(),
            r.replicate.to_string(),
            r.n_contaminated.to_string(),
            r.model.label().to_string(),
            r.mu_hat.to_string(),
            r.abs_bias.to_string(),
            r.nu_hat.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
