//! Finite-horizon HJB oracle.
//!
//! Marches `u_t + (σ²x²/2)u_xx − (μ+σ²)x u_x + (2μ+σ²)u + ((1 − u_x)⁺)²/(2Λ) = 0`
//! backward from `u(T,·) = 0` with an explicit scheme. As `T` grows `u(0,·)`
//! increases to `g`. Nothing here shares code with the ODE solver.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::market::{MarketParams, Regime};

/// Node placement on `[0, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "power")]
pub enum Spacing {
    Uniform,
    /// `x_i = x_max (i/nx)^p`, dense near the boundary layer at 0.
    Power(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HjbConfig {
    pub horizon: f64,
    pub x_max: f64,
    pub nx: usize,
    /// Time steps; `None` picks the smallest stable count.
    pub nt: Option<usize>,
    pub spacing: Spacing,
    /// Fraction of the stability limit used when `nt` is chosen automatically.
    pub cfl: f64,
    /// Number of stored time slices besides `t = T`.
    pub snapshots: usize,
}

impl Default for HjbConfig {
    fn default() -> Self {
        Self { horizon: 40.0, x_max: 25.0, nx: 400, nt: None, spacing: Spacing::Power(2.0), cfl: 0.9, snapshots: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeMeta {
    pub nt: usize,
    pub dt: f64,
    /// `dt` over the explicit stability limit.
    pub cfl_ratio: f64,
    pub spacing: Spacing,
    /// Largest `u_x − 1` seen at `t = 0`; positive values were clipped in the gain term.
    pub max_slope_overshoot: f64,
}

/// Stored slices of `u(t, x)`, ascending in `t`; the last slice is `t = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbGrid {
    pub params: MarketParams,
    pub horizon: f64,
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub meta: SchemeMeta,
}

/// Allowed slack when checking monotonicity of `u(0, ·)` in `x`.
const MONOTONE_TOL: f64 = 1e-9;

struct Stencil {
    hl: Vec<f64>,
    hr: Vec<f64>,
    diff: Vec<f64>,
    /// Advection velocity `(μ+σ²)x`.
    vel: Vec<f64>,
    central_adv: Vec<bool>,
}

fn nodes(cfg: &HjbConfig) -> Vec<f64> {
    let n = cfg.nx as f64;
    (0..=cfg.nx)
        .map(|i| {
            let xi = i as f64 / n;
            match cfg.spacing {
                Spacing::Uniform => cfg.x_max * xi,
                Spacing::Power(p) => cfg.x_max * xi.powf(p),
            }
        })
        .collect()
}

/// Smallest number of steps keeping every update a convex combination.
fn stable_rate(p: &MarketParams, x: &[f64]) -> f64 {
    let s2 = p.sigma * p.sigma;
    let k = (2.0 * p.mu + s2).abs();
    let mut rate: f64 = 0.0;
    for i in 1..x.len() - 1 {
        let hl = x[i] - x[i - 1];
        let hr = x[i + 1] - x[i];
        let d = s2 * x[i] * x[i] / (hl * hr) + ((p.mu + s2).abs() * x[i] + 1.0 / p.lambda_impact) / hl.min(hr) + k;
        rate = rate.max(d);
    }
    // Right boundary closure.
    let n = x.len() - 1;
    let h = x[n] - x[n - 1];
    let r = 1.0 + 2.0 * p.mu / s2;
    let d = (0.5 * s2 * x[n] * (r - 1.0).abs() + (p.mu + s2).abs() * x[n] + 1.0 / p.lambda_impact) / h + k;
    rate.max(d)
}

fn validate(params: &MarketParams, cfg: &HjbConfig) -> Result<()> {
    params.validate()?;
    if params.regime().regime != Regime::NegativeDrift {
        return Err(Error::Regime("the HJB oracle needs mu < 0".into()));
    }
    if !(cfg.horizon > 0.0 && cfg.horizon.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {}", cfg.horizon)));
    }
    if !(cfg.x_max > 0.0 && cfg.x_max.is_finite()) || cfg.nx < 4 {
        return Err(Error::InvalidInput("need x_max > 0 and nx >= 4".into()));
    }
    if !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(Error::InvalidInput(format!("cfl must be in (0, 1], got {}", cfg.cfl)));
    }
    if let Spacing::Power(p) = cfg.spacing {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing power must be >= 1, got {p}")));
        }
    }
    Ok(())
}

/// Marches from `u(T,·) = 0` to `t = 0`.
pub fn march_hjb(params: &MarketParams, cfg: &HjbConfig) -> Result<HjbGrid> {
    validate(params, cfg)?;
    let x = nodes(cfg);
    let n = cfg.nx;
    let rate = stable_rate(params, &x);
    let required = (cfg.horizon * rate).ceil() as usize;
    let nt = match cfg.nt {
        Some(nt) if nt < required => return Err(Error::Cfl { nt, required }),
        Some(nt) => nt,
        None => ((cfg.horizon * rate / cfg.cfl).ceil() as usize).max(1),
    };
    let dt = cfg.horizon / nt as f64;

    let s2 = params.sigma * params.sigma;
    let mu = params.mu;
    let lam = params.lambda_impact;
    let k = 2.0 * mu + s2;
    let r = 1.0 + 2.0 * mu / s2;
    let mut st = Stencil {
        hl: vec![0.0; n + 1],
        hr: vec![0.0; n + 1],
        diff: vec![0.0; n + 1],
        vel: vec![0.0; n + 1],
        central_adv: vec![false; n + 1],
    };
    for i in 1..n {
        st.hl[i] = x[i] - x[i - 1];
        st.hr[i] = x[i + 1] - x[i];
        st.diff[i] = 0.5 * s2 * x[i] * x[i];
        st.vel[i] = (mu + s2) * x[i];
        let h = 0.5 * (st.hl[i] + st.hr[i]);
        st.central_adv[i] = st.vel[i].abs() * h <= 2.0 * st.diff[i];
    }

    let snaps = cfg.snapshots.clamp(1, nt);
    // Step index (counted backward from T) at which each slice is stored.
    let mut store_at: Vec<usize> = (0..snaps).map(|j| nt - nt * j / snaps).collect();
    store_at.reverse();
    let mut times = Vec::with_capacity(snaps + 1);
    let mut slices = Vec::with_capacity(snaps + 1);
    times.push(cfg.horizon);
    slices.push(vec![0.0; n + 1]);

    let mut u = vec![0.0; n + 1];
    let mut un = vec![0.0; n + 1];
    let mut next_store = store_at.iter().peekable();
    for step in 1..=nt {
        for i in 1..n {
            let (hl, hr) = (st.hl[i], st.hr[i]);
            let pb = (u[i] - u[i - 1]) / hl;
            let pf = (u[i + 1] - u[i]) / hr;
            let pc = (hl * pf + hr * pb) / (hl + hr);
            let uxx = 2.0 * (pf - pb) / (hl + hr);
            let v = st.vel[i];
            let adv = if st.central_adv[i] {
                -v * pc
            } else if v > 0.0 {
                -v * pb
            } else {
                -v * pf
            };
            // The gain pushes mass toward smaller x; upwind it unless diffusion dominates.
            let c = (1.0 - pc).max(0.0) / lam;
            let slope = if c * 0.5 * (hl + hr) <= 2.0 * st.diff[i] { pc } else { pb };
            let q = (1.0 - slope).max(0.0);
            un[i] = u[i] + dt * (st.diff[i] * uxx + adv + k * u[i] + q * q / (2.0 * lam));
        }
        // Far field: pure power mode, u_xx = (r − 1) u_x / x.
        let pb = (u[n] - u[n - 1]) / (x[n] - x[n - 1]);
        let q = (1.0 - pb).max(0.0);
        un[n] = u[n] + dt * (0.5 * s2 * x[n] * (r - 1.0) * pb - (mu + s2) * x[n] * pb + k * u[n] + q * q / (2.0 * lam));
        un[0] = 0.0;
        std::mem::swap(&mut u, &mut un);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::SchemeFailure(format!("non-finite value after {step} steps")));
        }
        if next_store.peek() == Some(&&step) {
            next_store.next();
            times.push(cfg.horizon - step as f64 * dt);
            slices.push(u.clone());
        }
    }
    // Exact zero for the final slice.
    *times.last_mut().expect("slice") = 0.0;
    times.reverse();
    slices.reverse();

    let u0 = &slices[0];
    let scale = u0.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if let Some(i) = (1..=n).find(|&i| u0[i] < u0[i - 1] - MONOTONE_TOL * scale) {
        return Err(Error::SchemeFailure(format!("u(0, x) decreases at x = {}", x[i])));
    }
    let max_slope_overshoot = u0
        .windows(2)
        .zip(x.windows(2))
        .map(|(u, x)| (u[1] - u[0]) / (x[1] - x[0]) - 1.0)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(HjbGrid {
        params: *params,
        horizon: cfg.horizon,
        x,
        times,
        u: slices,
        meta: SchemeMeta { nt, dt, cfl_ratio: dt * rate, spacing: cfg.spacing, max_slope_overshoot },
    })
}

impl HjbGrid {
    /// `u(0, ·)` on the nodes.
    pub fn initial(&self) -> &[f64] {
        &self.u[0]
    }

    fn slice_weights(&self, t: f64) -> Result<(usize, f64)> {
        let last = self.times.len() - 1;
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let j = self.times.partition_point(|&s| s <= t).clamp(1, last);
        let (a, b) = (self.times[j - 1], self.times[j]);
        Ok((j - 1, (t - a) / (b - a)))
    }

    /// Centered `u_x` at node `i` of slice `j` (one-sided at the ends).
    fn node_slope(&self, j: usize, i: usize) -> f64 {
        let (x, u) = (&self.x, &self.u[j]);
        let n = x.len() - 1;
        if i == 0 {
            (u[1] - u[0]) / (x[1] - x[0])
        } else if i == n {
            (u[n] - u[n - 1]) / (x[n] - x[n - 1])
        } else {
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            (hl * (u[i + 1] - u[i]) / hr + hr * (u[i] - u[i - 1]) / hl) / (hl + hr)
        }
    }

    fn locate(&self, x: f64) -> Result<(usize, f64)> {
        let n = self.x.len() - 1;
        if !(x >= 0.0 && x <= self.x[n]) {
            return Err(Error::InvalidInput(format!("x = {x} outside [0, {}]", self.x[n])));
        }
        let i = self.x.partition_point(|&v| v <= x).clamp(1, n);
        Ok((i - 1, (x - self.x[i - 1]) / (self.x[i] - self.x[i - 1])))
    }

    /// `u(t, x)`, linear in both directions between stored values.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        let (j, wt) = self.slice_weights(t)?;
        let (i, wx) = self.locate(x)?;
        let at = |jj: usize| self.u[jj][i] + wx * (self.u[jj][i + 1] - self.u[jj][i]);
        Ok(at(j) + wt * (at(j + 1) - at(j)))
    }

    /// `u_x(t, x)` from nodal centered differences.
    pub fn slope(&self, t: f64, x: f64) -> Result<f64> {
        let (j, wt) = self.slice_weights(t)?;
        let (i, wx) = self.locate(x)?;
        let at = |jj: usize| {
            let a = self.node_slope(jj, i);
            a + wx * (self.node_slope(jj, i + 1) - a)
        };
        Ok(at(j) + wt * (at(j + 1) - at(j)))
    }

    /// Scaled rate `ψ = −(1 − u_x)⁺/Λ`.
    pub fn policy(&self, t: f64, x: f64) -> Result<f64> {
        let ux = self.slope(t, x)?;
        Ok(-(1.0 - ux).max(0.0) / self.params.lambda_impact)
    }

    /// Largest `|u(0, x_i) − g(x_i)|` over nodes in `[lo, hi]`.
    pub fn deviation(&self, g: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Deviation {
        let mut out = Deviation { max_abs: 0.0, at_x: f64::NAN, lo, hi };
        for (x, u) in self.x.iter().zip(self.initial()) {
            if *x >= lo && *x <= hi {
                let d = (u - g(*x)).abs();
                if !(d <= out.max_abs) {
                    out.max_abs = d;
                    out.at_x = *x;
                }
            }
        }
        out
    }

    /// `e^{μT}`: relative weight of inventory still worth holding at `T`.
    pub fn tail_certificate(&self) -> f64 {
        (self.params.mu * self.horizon).exp()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,u\n");
        for (t, u) in self.times.iter().zip(&self.u) {
            for (x, v) in self.x.iter().zip(u) {
                let _ = writeln!(out, "{},{},{}", fmt::num(*t), fmt::num(*x), fmt::num(*v));
            }
        }
        out
    }
}

/// Same as [`HjbGrid::policy`].
pub fn policy_from_grid(grid: &HjbGrid, t: f64, x: f64) -> Result<f64> {
    grid.policy(t, x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub max_abs: f64,
    pub at_x: f64,
    pub lo: f64,
    pub hi: f64,
}
