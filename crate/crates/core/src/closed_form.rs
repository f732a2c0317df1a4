//! Exact solution when `2μ + σ² = 0`.
//!
//! With `y = 1/x` and `q = y/(Λσ²)`, `1 − g'(x) = h(y)` where
//!
//! ```text
//! h(y) = Σ qⁿ/((n+1)·n!²) / Σ qⁿ/n!² = I₁(2√q) / (√q · I₀(2√q)),
//! ```
//!
//! so `g(x) = ∫₀ˣ (1 − h(1/z)) dz` and the optimal rate is `−(S/Λ) h(S/Φ)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::market::{MarketParams, RegimeTolerances};
use crate::quad;
use crate::value_ode::{default_series_cutoff, log_grid, SolverMeta, ValueFunction};

/// Below this `q` the power series is summed directly.
pub const Q_SWITCH: f64 = 100.0;
/// Above this Bessel argument `z = 2√q` the large-argument expansion is used.
pub const Z_ASYMPTOTIC: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalParams {
    pub sigma: f64,
    pub lambda_impact: f64,
}

impl CriticalParams {
    pub fn new(sigma: f64, lambda_impact: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && lambda_impact > 0.0 && lambda_impact.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "critical case needs sigma > 0 and lambda > 0, got sigma={sigma}, lambda={lambda_impact}"
            )));
        }
        Ok(Self { sigma, lambda_impact })
    }

    /// Accepts market parameters whose `|2μ+σ²|` is within the critical tolerance.
    pub fn from_market(params: &MarketParams) -> Result<Self> {
        params.validate()?;
        let gap = params.critical_gap();
        if gap.abs() > RegimeTolerances::default().critical {
            return Err(Error::Regime(format!("2mu + sigma^2 = {gap:e} is not critical")));
        }
        Self::new(params.sigma, params.lambda_impact)
    }

    /// The implied drift `−σ²/2`.
    pub fn mu(&self) -> f64 {
        -0.5 * self.sigma * self.sigma
    }

    pub fn market(&self, s0: f64, phi0: f64) -> Result<MarketParams> {
        MarketParams::new(self.mu(), self.sigma, self.lambda_impact, s0, phi0)
    }

    fn scale(&self) -> f64 {
        self.lambda_impact * self.sigma * self.sigma
    }
}

/// Ratio of the two power series, summed until a term drops below 1e-18 of the sum.
pub fn h_series(q: f64) -> f64 {
    let mut t = 1.0;
    let mut num = 1.0;
    let mut den = 1.0;
    let mut n = 0.0;
    loop {
        n += 1.0;
        t *= q / (n * n);
        den += t;
        let add = t / (n + 1.0);
        num += add;
        if t < 1e-18 * den {
            break;
        }
    }
    num / den
}

/// `I₁(z)/I₀(z)` by backward recurrence of `I_ν/I_{ν−1} = 1/(2ν/z + I_{ν+1}/I_ν)`.
pub fn bessel_ratio_recurrence(z: f64) -> f64 {
    let top = (z + 60.0 + 12.0 * z.sqrt()).ceil() as usize;
    let mut r = 0.0;
    for nu in (1..=top).rev() {
        r = 1.0 / (2.0 * nu as f64 / z + r);
    }
    r
}

/// `I₁(z)/I₀(z)` from its large-`z` expansion `1 + Σ c_m z^{−m}`, truncated at
/// the smallest term.
///
/// The coefficients follow from `r' = 1 − r/z − r²`:
/// `c_m = ((m − 2) c_{m−1} − Σ_{i=1}^{m−1} c_i c_{m−i}) / 2`, `c₀ = 1`.
pub fn bessel_ratio_asymptotic(z: f64) -> f64 {
    const TERMS: usize = 40;
    let mut c = [0.0f64; TERMS];
    c[0] = 1.0;
    let mut sum = 1.0;
    let mut zp = 1.0;
    let mut prev = f64::INFINITY;
    for m in 1..TERMS {
        let conv: f64 = (1..m).map(|i| c[i] * c[m - i]).sum();
        c[m] = ((m as f64 - 2.0) * c[m - 1] - conv) / 2.0;
        zp /= z;
        let term = c[m] * zp;
        if term.abs() >= prev {
            break;
        }
        sum += term;
        prev = term.abs();
        if prev < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `h` as a function of `q = y/(Λσ²)`.
pub fn h_of_q(q: f64) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    if q.is_infinite() {
        return 0.0;
    }
    if q <= Q_SWITCH {
        return h_series(q);
    }
    let z = 2.0 * q.sqrt();
    let ratio = if z <= Z_ASYMPTOTIC { bessel_ratio_recurrence(z) } else { bessel_ratio_asymptotic(z) };
    2.0 * ratio / z
}

/// `h(y)` in `(0, 1)`, non-increasing in `y`.
pub fn h_ratio(y: f64, p: &CriticalParams) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::InvalidInput(format!("h needs y > 0, got {y}")));
    }
    Ok(h_of_q(y / p.scale()))
}

/// `I₀(z)` by its power series; accurate for the moderate arguments used in checks.
pub fn bessel_i0(z: f64) -> f64 {
    let q = 0.25 * z * z;
    let mut t = 1.0;
    let mut sum = 1.0;
    let mut n = 0.0;
    while t > 1e-18 * sum {
        n += 1.0;
        t *= q / (n * n);
        sum += t;
    }
    sum
}

/// `1 − g'(x) = h(1/x)`, with the limits `g'(0) = 1`, `g'(∞) = 0`.
pub fn g_prime_critical(x: f64, p: &CriticalParams) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - h_of_q(1.0 / (x * p.scale()))
}

/// `g(x) = ∫₀ˣ (1 − h(1/z)) dz`; zero for `x ≤ 0`.
///
/// Integrated in `s = √z` to remove the `√z` behaviour at the origin, with
/// panel breaks where `h` changes evaluation method.
pub fn g_critical(x: f64, p: &CriticalParams) -> f64 {
    if !(x > 0.0) {
        return 0.0;
    }
    let scale = p.scale();
    let integrand = |s: f64| 2.0 * s * g_prime_critical(s * s, p);
    // s at q = Q_SWITCH and at z = Z_ASYMPTOTIC.
    let q_asym = 0.25 * Z_ASYMPTOTIC * Z_ASYMPTOTIC;
    let breaks = [(1.0 / (q_asym * scale)).sqrt(), (1.0 / (Q_SWITCH * scale)).sqrt()];
    let s_max = x.sqrt();
    let tol = 1e-14 * (1.0 + x);
    let mut total = 0.0;
    let mut lo = 0.0;
    for b in breaks.iter().copied().chain(std::iter::once(s_max)) {
        let hi = b.min(s_max);
        if hi > lo {
            total += quad::integrate(&integrand, lo, hi, tol).value;
            lo = hi;
        }
    }
    total
}

pub fn g_critical_many(xs: &[f64], p: &CriticalParams) -> Vec<f64> {
    xs.iter().map(|&x| g_critical(x, p)).collect()
}

/// Tabulates the exact `g`, `g'` on the solver's log grid so the critical
/// case can drive the same interpolation and execution machinery.
pub fn critical_value_function(p: &CriticalParams, x_max: f64, n_grid: usize) -> Result<ValueFunction> {
    let params = p.market(1.0, 1.0)?;
    let x0 = default_series_cutoff(&params);
    if !(x_max > x0) || n_grid < 8 {
        return Err(Error::InvalidInput("need x_max above the series cutoff and at least 8 points".into()));
    }
    let x = log_grid(x0, x_max, n_grid);
    let gp: Vec<f64> = x.iter().map(|&v| g_prime_critical(v, p)).collect();
    let mut g = vec![0.0; x.len()];
    g[1] = g_critical(x0, p);
    let integrand = |v: f64| g_prime_critical(v, p);
    for i in 1..x.len() - 1 {
        let tol = 1e-15 * (1.0 + x[i + 1]);
        g[i + 1] = g[i] + quad::integrate(&integrand, x[i], x[i + 1], tol).value;
    }
    let meta = SolverMeta {
        method: "closed form".into(),
        tol: 1e-14,
        x_far: x_max,
        formulation: "critical".into(),
        shoot_parameter: 0.0,
        shots: 0,
        steps: 0,
    };
    let mut vf = ValueFunction::from_parts(params, x0, x, g, gp, 0.0, meta)?;
    let (residual, _) = vf.residuals();
    vf.set_residual_sup(residual);
    Ok(vf)
}

/// `−(S/Λ) h(S/Φ)`; zero once the inventory is gone.
pub fn optimal_rate_critical(s: f64, phi: f64, p: &CriticalParams) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidInput(format!("price must be positive, got {s}")));
    }
    if !(phi >= 0.0) {
        return Err(Error::InvalidInput(format!("inventory must be non-negative, got {phi}")));
    }
    if phi == 0.0 {
        return Ok(0.0);
    }
    Ok(-(s / p.lambda_impact) * (1.0 - g_prime_critical(phi / s, p)))
}

/// CSV table `y,h`.
pub fn h_table(ys: &[f64], p: &CriticalParams) -> Result<String> {
    let mut out = String::from("y,h\n");
    for &y in ys {
        let _ = writeln!(out, "{},{}", fmt::num(y), fmt::num(h_ratio(y, p)?));
    }
    Ok(out)
}

/// CSV table `x,g`.
pub fn g_table(xs: &[f64], p: &CriticalParams) -> String {
    let mut out = String::from("x,g\n");
    for &x in xs {
        let _ = writeln!(out, "{},{}", fmt::num(x), fmt::num(g_critical(x, p)));
    }
    out
}
