//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls the crate's own special functions: normalising
//! constants come from `statrs`, densities are written out by hand and
//! integrals are computed by adaptive Simpson quadrature.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use statrs::function::gamma::ln_gamma;

/// Adaptive Simpson on `[a, b]` to absolute tolerance `eps`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
                + step(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, eps, 50)
}

/// Marginal log-density of `y` under the latent hierarchy
/// `tau ~ Gamma(nu/2, rate nu/2)`, `y | tau ~ N(mu, scale2 / tau)`,
/// integrated numerically over `tau = t^2` on `(0, 200)`.
pub fn latent_marginal_logpdf(y: f64, mu: f64, scale2: f64, nu: f64) -> f64 {
    let shape = 0.5 * nu;
    let ln_gamma_norm = shape * shape.ln() - ln_gamma(shape);
    let r2 = (y - mu) * (y - mu) / scale2;
    let integrand = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        let tau = t * t;
        let ln_normal = 0.5 * (tau / (2.0 * PI * scale2)).ln() - 0.5 * tau * r2;
        let ln_gamma_pdf = ln_gamma_norm + (shape - 1.0) * tau.ln() - shape * tau;
        2.0 * t * (ln_normal + ln_gamma_pdf).exp()
    };
    // split where the integrand has most of its mass to help the recursion
    let knots = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 200f64.sqrt()];
    let total: f64 = knots
        .windows(2)
        .map(|w| integrate(&integrand, w[0], w[1], 1e-15))
        .sum();
    total.ln()
}

/// Closed-form t log-density with `statrs` gamma functions.
pub fn t_logpdf_reference(y: f64, mu: f64, scale2: f64, nu: f64) -> f64 {
    let d2 = (y - mu) * (y - mu) / scale2;
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (PI * nu * scale2).ln()
        - 0.5 * (nu + 1.0) * (d2 / nu).ln_1p()
}

/// Observed-data t log-likelihood of `(mu, sigma2, nu)`.
pub fn t_loglik_reference(y: &[f64], s2: &[f64], mu: f64, sigma2: f64, nu: f64) -> f64 {
    y.iter()
        .zip(s2)
        .map(|(y, s)| t_logpdf_reference(*y, mu, sigma2 + s, nu))
        .sum()
}

/// Maximum of the t log-likelihood over a regular grid
/// `mu in [min y, max y] x sigma2 in [0, 4 var(y)] x nu in [1, 100]`.
pub fn grid_max_loglik(y: &[f64], s2: &[f64], points: usize) -> f64 {
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let at = |i: usize, a: f64, b: f64| a + (b - a) * i as f64 / (points - 1) as f64;
    let mut best = f64::NEG_INFINITY;
    for k in 0..points {
        let nu = at(k, 1.0, 100.0);
        // constants that depend on nu only
        let c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (PI * nu).ln();
        for j in 0..points {
            let sigma2 = at(j, 0.0, 4.0 * var);
            for i in 0..points {
                let mu = at(i, lo, hi);
                let l: f64 = y
                    .iter()
                    .zip(s2)
                    .map(|(y, s)| {
                        let v = sigma2 + s;
                        c - 0.5 * v.ln()
                            - 0.5 * (nu + 1.0) * ((y - mu) * (y - mu) / (v * nu)).ln_1p()
                    })
                    .sum();
                best = best.max(l);
            }
        }
    }
    best
}

/// Central finite-difference derivative with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Directory holding the dataset fixtures: `$ROBUSTMETA_FIXTURES` or the
/// crate's bundled `fixtures/`.
pub fn fixture_dir() -> PathBuf {
    std::env::var_os("ROBUSTMETA_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"))
}

pub fn fixture(name: &str) -> Option<PathBuf> {
    let p = fixture_dir().join(name);
    p.exists().then_some(p)
}
