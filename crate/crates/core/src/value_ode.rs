//! The reduced value function `g` on `x = Φ/S`.
//!
//! `g` solves
//!
//! ```text
//! σ²x²/2 g'' − (μ+σ²) x g' + (2μ+σ²) g + (1 − g')²/(2Λ) = 0,   x > 0,
//! g(0) = 0,  g'(0) = 1,  g non-decreasing and concave,
//! ```
//!
//! and the full value is `G(Φ₀, S₀) = S₀² g(Φ₀/S₀)`.
//!
//! Near `x = 0` every solution with `g(0) = 0, g'(0) = 1` shares the
//! expansion `g'(x) = 1 − a√x + b x + c x^{3/2} + …` with `a = √(2Λ|μ|)`;
//! the family differs only by a mode of size `exp(−C/√x)`. That mode grows
//! without bound when integrating away from the origin, so the solver shoots
//! inward instead. It starts far out at `x_far` on the branch without the
//! `x²` mode, integrates toward the origin where the boundary-layer mode
//! decays, and bisects on the single far-field parameter until the
//! trajectory meets the series at the cutoff `x₀`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::market::{MarketParams, Regime};
use crate::rk::{self, Flow, StepControl};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_X_MAX: f64 = 50.0;
pub const DEFAULT_GRID_POINTS: usize = 2048;
/// Largest successive-term ratio accepted for the boundary-layer series.
pub const SERIES_RATIO_LIMIT: f64 = 0.01;
/// Slack allowed on discrete second differences of `g`.
pub const TOL_CONCAVITY: f64 = 1e-7;

/// Coefficients of `g'(x) = 1 − a√x + b x + c x^{3/2}`.
///
/// `a` balances the `O(x)` terms (`μ + a²/(2Λ) = 0`), `b` the `O(x^{3/2})`
/// terms and `c` the `O(x²)` terms of the ODE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLayer {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BoundaryLayer {
    pub fn new(params: &MarketParams) -> Result<Self> {
        if params.mu >= 0.0 {
            return Err(Error::Regime("boundary-layer series needs mu < 0".into()));
        }
        let lam = params.lambda_impact;
        let s2 = params.sigma * params.sigma;
        let a = (2.0 * lam * params.mu.abs()).sqrt();
        let b = lam * (s2 / 12.0 - params.mu / 3.0);
        let c = b * b / (2.0 * a);
        Ok(Self { a, b, c })
    }

    /// `(g(x), g'(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let s = x.sqrt();
        let g = x - 2.0 * self.a / 3.0 * x * s + 0.5 * self.b * x * x + 0.4 * self.c * x * x * s;
        let gp = 1.0 - self.a * s + self.b * x + self.c * x * s;
        (g, gp)
    }

    pub fn g_second(&self, x: f64) -> f64 {
        let s = x.sqrt();
        -0.5 * self.a / s + self.b + 1.5 * self.c * s
    }

    /// Largest ratio between consecutive terms of the `g'` expansion at `x`.
    pub fn next_term_ratio(&self, x: f64) -> f64 {
        let s = x.sqrt();
        (self.b.abs() * s / self.a).max(self.c.abs() * s / self.b.abs().max(f64::MIN_POSITIVE))
    }
}

/// Default series cutoff `1e-6 / max(1, Λ|μ|)`.
pub fn default_series_cutoff(params: &MarketParams) -> f64 {
    1e-6 / (params.lambda_impact * params.mu.abs()).max(1.0)
}

/// `(g(x₀), g'(x₀))` from the boundary-layer expansion.
pub fn series_init(params: &MarketParams, x0: f64) -> Result<(f64, f64)> {
    let series = BoundaryLayer::new(params)?;
    check_cutoff(&series, x0)?;
    Ok(series.eval(x0))
}

fn check_cutoff(series: &BoundaryLayer, x0: f64) -> Result<()> {
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(Error::InvalidInput(format!("series cutoff must be positive, got {x0}")));
    }
    let ratio = series.next_term_ratio(x0);
    if ratio > SERIES_RATIO_LIMIT {
        return Err(Error::CutoffTooLarge { x0, ratio, limit: SERIES_RATIO_LIMIT });
    }
    Ok(())
}

/// The four terms of the ODE's left-hand side.
fn ode_terms(p: &MarketParams, x: f64, g: f64, gp: f64, gpp: f64) -> [f64; 4] {
    let s2 = p.sigma * p.sigma;
    [
        0.5 * s2 * x * x * gpp,
        -(p.mu + s2) * x * gp,
        (2.0 * p.mu + s2) * g,
        (1.0 - gp) * (1.0 - gp) / (2.0 * p.lambda_impact),
    ]
}

/// `g''` implied by the ODE at `(x, g, g')`.
pub fn ode_second_derivative(p: &MarketParams, x: f64, g: f64, gp: f64) -> f64 {
    let s2 = p.sigma * p.sigma;
    let bracket = (p.mu + s2) * x * gp - (2.0 * p.mu + s2) * g - (1.0 - gp) * (1.0 - gp) / (2.0 * p.lambda_impact);
    2.0 * bracket / (s2 * x * x)
}

/// Scaled residual `|LHS| / (1 + Σ|term|)` and raw `|LHS|`.
pub fn ode_residual(p: &MarketParams, x: f64, g: f64, gp: f64, gpp: f64) -> (f64, f64) {
    let t = ode_terms(p, x, g, gp, gpp);
    let lhs: f64 = t.iter().sum();
    let mag: f64 = t.iter().map(|v| v.abs()).sum();
    (lhs.abs() / (1.0 + mag), lhs.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub x_max: f64,
    pub n_grid: usize,
    /// Series cutoff `x₀`; `None` picks [`default_series_cutoff`].
    pub x_series_cutoff: Option<f64>,
    /// Far-field start as a multiple of `x_max`.
    pub far_field_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            x_max: DEFAULT_X_MAX,
            n_grid: DEFAULT_GRID_POINTS,
            x_series_cutoff: None,
            far_field_factor: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub method: String,
    pub tol: f64,
    pub x_far: f64,
    /// `"shifted"` integrates `g − L` with `L` the large-x limit, `"direct"` integrates `g`.
    pub formulation: String,
    pub shoot_parameter: f64,
    pub shots: usize,
    pub steps: usize,
}

/// Grid representation of `g` and `g'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ValueFunctionDoc", into = "ValueFunctionDoc")]
pub struct ValueFunction {
    params: MarketParams,
    x_series_cutoff: f64,
    x: Vec<f64>,
    g: Vec<f64>,
    g_prime: Vec<f64>,
    residual_sup: f64,
    solver_meta: SolverMeta,
    series: BoundaryLayer,
    /// Monotone Hermite slopes of `g'` at the nodes.
    slopes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ValueFunctionDoc {
    params: MarketParams,
    x_series_cutoff: f64,
    x: Vec<f64>,
    g: Vec<f64>,
    g_prime: Vec<f64>,
    residual_sup: f64,
    solver_meta: SolverMeta,
}

impl From<ValueFunction> for ValueFunctionDoc {
    fn from(v: ValueFunction) -> Self {
        Self {
            params: v.params,
            x_series_cutoff: v.x_series_cutoff,
            x: v.x,
            g: v.g,
            g_prime: v.g_prime,
            residual_sup: v.residual_sup,
            solver_meta: v.solver_meta,
        }
    }
}

impl TryFrom<ValueFunctionDoc> for ValueFunction {
    type Error = Error;

    fn try_from(d: ValueFunctionDoc) -> Result<Self> {
        ValueFunction::from_parts(d.params, d.x_series_cutoff, d.x, d.g, d.g_prime, d.residual_sup, d.solver_meta)
    }
}

impl ValueFunction {
    /// Assembles a value function from grid data. The grid must start at 0
    /// with `x[1]` equal to the series cutoff.
    pub fn from_parts(
        params: MarketParams,
        x_series_cutoff: f64,
        x: Vec<f64>,
        g: Vec<f64>,
        g_prime: Vec<f64>,
        residual_sup: f64,
        solver_meta: SolverMeta,
    ) -> Result<Self> {
        params.validate()?;
        let series = BoundaryLayer::new(&params)?;
        let n = x.len();
        if n < 3 || g.len() != n || g_prime.len() != n {
            return Err(Error::InvalidInput("grid arrays must have equal length >= 3".into()));
        }
        if x[0] != 0.0 || x[1] != x_series_cutoff {
            return Err(Error::InvalidInput("grid must start at 0 followed by the series cutoff".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("grid must be strictly increasing".into()));
        }
        if g.iter().chain(&g_prime).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid values must be finite".into()));
        }
        let slopes = monotone_slopes(&params, &x, &g, &g_prime);
        Ok(Self { params, x_series_cutoff, x, g, g_prime, residual_sup, solver_meta, series, slopes })
    }

    pub fn params(&self) -> &MarketParams {
        &self.params
    }

    pub fn x_series_cutoff(&self) -> f64 {
        self.x_series_cutoff
    }

    pub fn x_grid(&self) -> &[f64] {
        &self.x
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn g_prime(&self) -> &[f64] {
        &self.g_prime
    }

    pub fn residual_sup(&self) -> f64 {
        self.residual_sup
    }

    pub fn solver_meta(&self) -> &SolverMeta {
        &self.solver_meta
    }

    pub fn series(&self) -> &BoundaryLayer {
        &self.series
    }

    pub fn x_max(&self) -> f64 {
        *self.x.last().expect("non-empty grid")
    }

    /// Index `i >= 1` with `x[i] <= x < x[i+1]`, for `x` strictly inside the grid range.
    fn interval(&self, x: f64) -> usize {
        let i = self.x.partition_point(|&v| v <= x);
        (i - 1).clamp(1, self.x.len() - 2)
    }

    /// `g'(x)` in `[0, 1]`, non-increasing in `x`.
    ///
    /// Series on `[0, x₀)`, monotone cubic Hermite on the grid, and the last
    /// grid value beyond `x_max`.
    pub fn g_prime_at(&self, x: f64) -> f64 {
        let n = self.x.len();
        let v = if x <= 0.0 {
            1.0
        } else if x < self.x_series_cutoff {
            self.series.eval(x).1
        } else if x >= self.x[n - 1] {
            self.g_prime[n - 1]
        } else {
            let i = self.interval(x);
            let h = self.x[i + 1] - self.x[i];
            let t = (x - self.x[i]) / h;
            hermite(t, h, self.g_prime[i], self.g_prime[i + 1], self.slopes[i], self.slopes[i + 1])
        };
        v.clamp(0.0, 1.0)
    }

    /// `g(x)`: series near the origin, the exact integral of the `g'`
    /// interpolant between nodes, linear continuation beyond `x_max`.
    pub fn g_at(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= 0.0 {
            0.0
        } else if x < self.x_series_cutoff {
            self.series.eval(x).0
        } else if x >= self.x[n - 1] {
            self.g[n - 1] + self.g_prime[n - 1] * (x - self.x[n - 1])
        } else {
            let i = self.interval(x);
            let h = self.x[i + 1] - self.x[i];
            let t = (x - self.x[i]) / h;
            self.g[i] + hermite_integral(t, h, self.g_prime[i], self.g_prime[i + 1], self.slopes[i], self.slopes[i + 1])
        }
    }

    /// `G(Φ₀, S₀) = S₀² g(Φ₀/S₀)`.
    pub fn value_of(&self, phi0: f64, s0: f64) -> f64 {
        s0 * s0 * self.g_at(phi0 / s0)
    }

    /// Residuals of the ODE on the grid beyond the cutoff, with `g''` taken
    /// from 7-point finite differences of the stored `g'`.
    pub fn residuals(&self) -> (f64, f64) {
        grid_residuals(&self.params, &self.x, &self.g, &self.g_prime)
    }

    /// Per-node `(x, scaled, raw)` residuals behind [`Self::residuals`].
    pub fn residual_profile(&self) -> Vec<(f64, f64, f64)> {
        residual_profile(&self.params, &self.x, &self.g, &self.g_prime)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_grid(&self.params, &self.x, &self.g, &self.g_prime)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,g,g_prime\n");
        for i in 0..self.x.len() {
            let _ = writeln!(out, "{},{},{}", fmt::num(self.x[i]), fmt::num(self.g[i]), fmt::num(self.g_prime[i]));
        }
        out
    }

    pub(crate) fn set_residual_sup(&mut self, r: f64) {
        self.residual_sup = r;
    }

    /// Replaces the grid values, keeping the grid; used to probe validation.
    pub fn with_values(&self, g: Vec<f64>, g_prime: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            self.params,
            self.x_series_cutoff,
            self.x.clone(),
            g,
            g_prime,
            self.residual_sup,
            self.solver_meta.clone(),
        )
    }
}

fn hermite(t: f64, h: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// `∫_0^{t h}` of the Hermite cubic.
fn hermite_integral(t: f64, h: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    h * ((t - t3 + 0.5 * t4) * y0
        + (0.5 * t2 - 2.0 / 3.0 * t3 + 0.25 * t4) * h * d0
        + (t3 - 0.5 * t4) * y1
        + (-t3 / 3.0 + 0.25 * t4) * h * d1)
}

/// Node slopes for `g'`: the ODE's `g''`, limited (Fritsch–Carlson) so the
/// interpolant stays monotone.
fn monotone_slopes(p: &MarketParams, x: &[f64], g: &[f64], gp: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n];
    for i in 1..n {
        d[i] = ode_second_derivative(p, x[i], g[i], gp[i]).min(0.0);
        if !d[i].is_finite() {
            d[i] = 0.0;
        }
    }
    for i in 1..n - 1 {
        let delta = (gp[i + 1] - gp[i]) / (x[i + 1] - x[i]);
        if delta == 0.0 {
            d[i] = 0.0;
            d[i + 1] = 0.0;
            continue;
        }
        let alpha = d[i] / delta;
        let beta = d[i + 1] / delta;
        if alpha < 0.0 {
            d[i] = 0.0;
        }
        if beta < 0.0 {
            d[i + 1] = 0.0;
        }
        let r2 = alpha * alpha + beta * beta;
        if r2 > 9.0 {
            let tau = 3.0 / r2.sqrt();
            d[i] = tau * alpha * delta;
            d[i + 1] = tau * beta * delta;
        }
    }
    d
}

/// Weights for the first derivative at `z` from nodes `xs` (Fornberg).
fn fd_weights(z: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let m = 1;
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - z;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|row| row[1]).collect()
}

/// `(x, scaled, raw)` residual at every node beyond the origin.
fn residual_profile(p: &MarketParams, x: &[f64], g: &[f64], gp: &[f64]) -> Vec<(f64, f64, f64)> {
    let n = x.len();
    // Node 0 is x = 0 where the equation degenerates; stencils use nodes 1..n.
    let lo = 1usize;
    let width = 7usize.min(n - lo);
    (lo..n)
        .map(|i| {
            let start = i.saturating_sub(width / 2).max(lo).min(n - width);
            let w = fd_weights(x[i], &x[start..start + width]);
            let gpp: f64 = w.iter().zip(&gp[start..start + width]).map(|(a, b)| a * b).sum();
            let (s, r) = ode_residual(p, x[i], g[i], gp[i], gpp);
            (x[i], s, r)
        })
        .collect()
}

fn grid_residuals(p: &MarketParams, x: &[f64], g: &[f64], gp: &[f64]) -> (f64, f64) {
    residual_profile(p, x, g, gp).iter().fold((0.0f64, 0.0f64), |(s, r), v| (s.max(v.1), r.max(v.2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `g` non-decreasing on the grid.
    pub monotone: bool,
    /// Discrete second differences of `g` and increments of `g'` non-positive (within slack).
    pub concave: bool,
    /// Scaled ODE residual on the grid beyond the cutoff.
    pub residual_sup: f64,
    /// Unscaled `|LHS|` supremum.
    pub raw_residual_sup: f64,
    /// `g(0) = 0`, `g'(0) = 1`, `0 <= g <= x`, `g' ∈ [0, 1]`.
    pub bounds_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.monotone && self.concave && self.bounds_ok && self.residual_sup <= 10.0 * tol
    }
}

fn validate_grid(p: &MarketParams, x: &[f64], g: &[f64], gp: &[f64]) -> ValidationReport {
    let n = x.len();
    let monotone = g.windows(2).all(|w| w[1] >= w[0]);
    let mut concave = gp.windows(2).all(|w| w[1] <= w[0] + TOL_CONCAVITY);
    for i in 1..n - 1 {
        let left = (g[i] - g[i - 1]) / (x[i] - x[i - 1]);
        let right = (g[i + 1] - g[i]) / (x[i + 1] - x[i]);
        if right > left + TOL_CONCAVITY {
            concave = false;
        }
    }
    let slack = 1e-12;
    let bounds_ok = g[0] == 0.0
        && gp[0] == 1.0
        && g.iter().zip(x).all(|(g, x)| *g >= -slack && *g <= x * (1.0 + slack) + slack)
        && gp.iter().all(|v| (-slack..=1.0 + slack).contains(v));
    let (residual_sup, raw_residual_sup) = grid_residuals(p, x, g, gp);
    ValidationReport { monotone, concave, residual_sup, raw_residual_sup, bounds_ok }
}

/// Log-spaced grid `[0, x₀, …, x_max]` with `n` points.
pub fn log_grid(x0: f64, x_max: f64, n: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    x.push(0.0);
    let span = (x_max / x0).ln();
    for i in 0..n - 1 {
        x.push(x0 * (span * i as f64 / (n - 2) as f64).exp());
    }
    x[1] = x0;
    x[n - 1] = x_max;
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shot {
    /// The trajectory crossed `g = x`: too much value near the origin.
    High,
    /// The trajectory crossed `g = 0`.
    Low,
    Reached {
        g: f64,
        gp: f64,
        mismatch: f64,
    },
}

impl Shot {
    fn sign(&self) -> i8 {
        match self {
            Shot::High => 1,
            Shot::Low => -1,
            Shot::Reached { mismatch, .. } => {
                if *mismatch > 0.0 {
                    1
                } else if *mismatch < 0.0 {
                    -1
                } else {
                    0
                }
            }
        }
    }
}

struct Shooter {
    p: MarketParams,
    series: BoundaryLayer,
    /// Large-x limit subtracted from `g` in the shifted formulation, else 0.
    shift: f64,
    shifted: bool,
    x_far: f64,
    x_end: f64,
    ctl: StepControl,
}

impl Shooter {
    fn new(p: &MarketParams, series: BoundaryLayer, x_end: f64, opts: &SolverOptions) -> Self {
        let s2 = p.sigma * p.sigma;
        let k = p.critical_gap();
        // Power of the decaying far-field mode, g − L ~ κ x^r.
        let r = 1.0 + 2.0 * p.mu / s2;
        let shifted = k < 0.0 && r < -0.5;
        let shift = if shifted { -1.0 / (2.0 * p.lambda_impact * k) } else { 0.0 };
        let x_far = if shifted {
            // g saturates near x ~ min(1, L); start where the decaying mode is
            // still comfortably representable.
            let x_c = shift.min(1.0);
            (opts.far_field_factor * opts.x_max).min(x_c * (460.0 / r.abs()).exp())
        } else {
            opts.far_field_factor * opts.x_max
        };
        let ctl = StepControl::new(opts.tol, 1e-300, 0.01 * x_far);
        Self { p: *p, series, shift, shifted, x_far, x_end, ctl }
    }

    /// Power `r = 1 + 2μ/σ²` of the decaying far-field mode.
    fn decay_power(&self) -> f64 {
        1.0 + 2.0 * self.p.mu / (self.p.sigma * self.p.sigma)
    }

    fn bracket(&self) -> (f64, f64) {
        if self.shifted {
            (-700.0, self.shift.ln())
        } else {
            (0.0, self.x_far)
        }
    }

    /// Far-field state `(w, g')` on the branch without the `x²` mode.
    fn far_state(&self, theta: f64) -> [f64; 2] {
        let p = &self.p;
        let s2 = p.sigma * p.sigma;
        let k = p.critical_gap();
        let lam = p.lambda_impact;
        let x = self.x_far;
        if self.shifted {
            let w = -theta.exp();
            let a = s2 * x + 1.0 / lam;
            let gp = 2.0 * k * w / (a + (a * a - 2.0 * k * w / lam).sqrt());
            [w, gp]
        } else {
            let num = s2 * x - k * theta;
            let disc = s2 * s2 * x * x + 2.0 * num / lam;
            let u = 2.0 * num / (s2 * x + disc.max(0.0).sqrt());
            [theta, 1.0 - u]
        }
    }

    fn rhs(&self, shifted: bool) -> impl Fn(f64, &[f64; 2]) -> [f64; 2] + '_ {
        let p = &self.p;
        let s2 = p.sigma * p.sigma;
        let k = p.critical_gap();
        let lam = p.lambda_impact;
        let drift = p.mu + s2;
        move |x, y| {
            let (w, gp) = (y[0], y[1]);
            let bracket = if shifted {
                drift * x * gp - k * w + gp / lam - gp * gp / (2.0 * lam)
            } else {
                drift * x * gp - k * w - (1.0 - gp) * (1.0 - gp) / (2.0 * lam)
            };
            [gp, 2.0 * bracket / (s2 * x * x)]
        }
    }

    /// Integrates inward from `x_far` to the series cutoff.
    ///
    /// The shifted form hands over to the direct form once `g < L/2`, since
    /// `g = w + L` only carries absolute precision `ulp(L)` and `g` is tiny
    /// near the origin.
    fn shoot(&self, theta: f64, landing: &[f64], record: &mut Vec<(f64, f64, f64)>) -> Result<(Shot, usize)> {
        let mut outcome = None;
        let mut last = (self.x_far, self.far_state(theta)[0] + self.shift);
        let mut next = 0usize;
        let mut steps = 0usize;
        let mut x = self.x_far;
        let mut y = self.far_state(theta);
        let mut shifted = self.shifted;
        loop {
            let shift = if shifted { self.shift } else { 0.0 };
            let handover = shifted;
            let mut handed = false;
            let mut ctl = self.ctl;
            ctl.h_init = if x == self.x_far { self.ctl.h_init } else { 1e-3 * x };
            let run = rk::integrate(self.rhs(shifted), x, y, self.x_end, &ctl, landing, |x, y| {
                let g = y[0] + shift;
                last = (x, g);
                if g > x * (1.0 + 1e-7) {
                    outcome = Some(Shot::High);
                    return Flow::Stop;
                }
                if g < 0.0 {
                    outcome = Some(Shot::Low);
                    return Flow::Stop;
                }
                while next < landing.len() && landing[next] > x {
                    next += 1;
                }
                if next < landing.len() && x == landing[next] {
                    record.push((x, g, y[1]));
                    next += 1;
                }
                if handover && g < 0.5 * shift {
                    handed = true;
                    return Flow::Stop;
                }
                Flow::Continue
            });
            let run = match run {
                Ok(run) => run,
                // A trajectory that diverges before leaving [0, x] is
                // classified by which side of the series it was on.
                Err(Error::NumericalBlowup { .. }) => {
                    let shot = if last.1 > self.series.eval(last.0).0 { Shot::High } else { Shot::Low };
                    return Ok((shot, steps));
                }
                Err(e) => return Err(e),
            };
            steps += run.accepted;
            if let Some(shot) = outcome {
                return Ok((shot, steps));
            }
            if handed && run.x > self.x_end {
                x = run.x;
                y = [run.y[0] + shift, run.y[1]];
                shifted = false;
                continue;
            }
            let g = run.y[0] + shift;
            let mismatch = g - self.series.eval(self.x_end).0;
            return Ok((Shot::Reached { g, gp: run.y[1], mismatch }, steps));
        }
    }
}

/// Best shot so far: parameter, |mismatch|, trajectory.
type Bracketed = (f64, f64, Vec<(f64, f64, f64)>);

/// Solves for `g` on `[0, x_max]`.
pub fn integrate_value_ode(params: &MarketParams, opts: &SolverOptions) -> Result<ValueFunction> {
    params.validate()?;
    if params.regime().regime != Regime::NegativeDrift {
        return Err(Error::Regime(
            "value is infinite for positive drift and equals Φ₀S₀ without an optimizer at zero drift; the ODE solver needs mu < 0".into(),
        ));
    }
    if !(opts.tol > 0.0) || opts.n_grid < 8 {
        return Err(Error::InvalidInput("need tol > 0 and at least 8 grid points".into()));
    }
    let series = BoundaryLayer::new(params)?;
    let x0 = opts.x_series_cutoff.unwrap_or_else(|| default_series_cutoff(params));
    check_cutoff(&series, x0)?;
    if !(opts.x_max > x0) {
        return Err(Error::InvalidInput("x_max must exceed the series cutoff".into()));
    }

    let shooter = Shooter::new(params, series, x0, opts);
    let x = log_grid(x0, opts.x_max, opts.n_grid);
    // Every shot lands on the grid so the accepted trajectory is exactly the
    // one the bisection converged on.
    let landing: Vec<f64> = x[1..].iter().rev().copied().filter(|&v| v < shooter.x_far).collect();
    let (mut lo, mut hi) = shooter.bracket();
    let mut shots = 0usize;
    let mut steps = 0usize;
    let mut best: Option<Bracketed> = None;
    let mut eval = |theta: f64, best: &mut Option<Bracketed>| -> Result<i8> {
        let mut record = Vec::with_capacity(landing.len());
        let (shot, n) = shooter.shoot(theta, &landing, &mut record)?;
        shots += 1;
        steps += n;
        if let Shot::Reached { mismatch, .. } = shot {
            if best.as_ref().is_none_or(|(_, m, _)| mismatch.abs() < *m) {
                *best = Some((theta, mismatch.abs(), record));
            }
        }
        Ok(shot.sign())
    };
    let s_lo = eval(lo, &mut best)?;
    let s_hi = eval(hi, &mut best)?;
    if s_lo == s_hi && s_lo != 0 {
        return Err(Error::ShootingFailed(format!(
            "far-field bracket [{lo}, {hi}] does not straddle the admissible solution"
        )));
    }
    if s_lo != 0 && s_hi != 0 {
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let s = eval(mid, &mut best)?;
            if s == 0 {
                break;
            }
            if s == s_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (theta, _, mut record) =
        best.ok_or_else(|| Error::ShootingFailed("no trajectory reached the series cutoff".into()))?;
    if record.len() != landing.len() {
        return Err(Error::ShootingFailed("accepted trajectory missed grid points".into()));
    }
    record.reverse();
    // Grid points at or beyond x_far follow the pure far-field mode.
    let far = shooter.far_state(theta);
    let r = shooter.decay_power();
    for &xv in x[1 + record.len()..].iter() {
        let ratio = xv / shooter.x_far;
        record.push((xv, far[0] * ratio.powf(r) + shooter.shift, far[1] * ratio.powf(r - 1.0)));
    }

    let n_grid = x.len();
    let mut g = vec![0.0; n_grid];
    let mut gp = vec![0.0; n_grid];
    gp[0] = 1.0;
    for (i, (xr, gr, gpr)) in record.iter().enumerate() {
        debug_assert_eq!(*xr, x[i + 1]);
        if !gr.is_finite() || !gpr.is_finite() {
            return Err(Error::NumericalBlowup { x: *xr });
        }
        if *gpr < -opts.tol || *gpr > 1.0 + opts.tol {
            return Err(Error::MonotonicityViolation { x: *xr, g_prime: *gpr });
        }
        g[i + 1] = *gr;
        gp[i + 1] = gpr.clamp(0.0, 1.0);
    }
    // The series owns [0, x₀). Keeping the trajectory's g at x₀ leaves the
    // ulp-level matching offset common to all nodes; g' takes the series
    // value so the interpolant stays monotone across x₀.
    gp[1] = gp[1].min(series.eval(x0).1);

    let (residual_sup, _) = grid_residuals(params, &x, &g, &gp);
    let meta = SolverMeta {
        method: "dopri5 inward shooting".into(),
        tol: opts.tol,
        x_far: shooter.x_far,
        formulation: if shooter.shifted { "shifted" } else { "direct" }.into(),
        shoot_parameter: theta,
        shots,
        steps,
    };
    ValueFunction::from_parts(*params, x0, x, g, gp, residual_sup, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mu: f64, sigma: f64, lam: f64) -> MarketParams {
        MarketParams::new(mu, sigma, lam, 1.0, 1.0).unwrap()
    }

    #[test]
    fn series_leading_coefficient() {
        let s = BoundaryLayer::new(&params(-0.125, 0.5, 1.0)).unwrap();
        assert!((s.a - 0.5).abs() < 1e-15);
        let x = 1e-10;
        let (g, gp) = s.eval(x);
        assert!(((1.0 - gp) / x.sqrt() - 0.5).abs() < 1e-4);
        assert!((g / x - 1.0).abs() < 1e-4);
    }

    #[test]
    fn series_satisfies_ode_to_high_order() {
        // Residual of the truncated series is O(x^{5/2}) while each term is O(x).
        for (mu, sigma, lam) in [(-0.125, 0.5, 1.0), (-0.3, 0.2, 1.0), (-0.05, 0.7, 3.0)] {
            let p = params(mu, sigma, lam);
            let s = BoundaryLayer::new(&p).unwrap();
            let r1 = {
                let x = 1e-4;
                let (g, gp) = s.eval(x);
                ode_residual(&p, x, g, gp, s.g_second(x)).1
            };
            let r2 = {
                let x = 1e-6;
                let (g, gp) = s.eval(x);
                ode_residual(&p, x, g, gp, s.g_second(x)).1
            };
            // Two decades in x: at least (100)^{2.4} reduction.
            assert!(r1 / r2 > 100f64.powf(2.4), "{mu} {sigma} {lam}: {r1} {r2}");
        }
    }

    #[test]
    fn cutoff_guard() {
        let p = params(-0.125, 0.5, 1.0);
        assert!(series_init(&p, 1e-6).is_ok());
        assert!(matches!(series_init(&p, 1.0), Err(Error::CutoffTooLarge { .. })));
        assert!(series_init(&p, 0.0).is_err());
        assert!(series_init(&params(0.1, 0.5, 1.0), 1e-6).is_err());
    }

    #[test]
    fn refuses_non_negative_drift() {
        for mu in [0.0, 0.1] {
            let p = params(mu, 0.2, 1.0);
            assert!(matches!(integrate_value_ode(&p, &SolverOptions::default()), Err(Error::Regime(_))));
        }
    }

    #[test]
    fn hermite_integral_matches_quadrature() {
        let (y0, y1, d0, d1, h) = (0.9, 0.7, -0.5, -0.1, 0.3);
        let n = 2000;
        let mut acc = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            acc += hermite(t, h, y0, y1, d0, d1) * h / n as f64;
        }
        assert!((hermite_integral(1.0, h, y0, y1, d0, d1) - acc).abs() < 1e-8);
    }

    #[test]
    fn fd_weights_are_exact_on_quartics() {
        let xs = [0.1, 0.13, 0.2, 0.24, 0.3];
        let w = fd_weights(0.2, &xs);
        let f = |x: f64| x.powi(4) - 2.0 * x.powi(3) + x;
        let d: f64 = w.iter().zip(&xs).map(|(w, x)| w * f(*x)).sum();
        let exact = 4.0 * 0.2f64.powi(3) - 6.0 * 0.04 + 1.0;
        assert!((d - exact).abs() < 1e-12);
    }
}
