//! Monte Carlo estimates of `E[V^φ]` under common random numbers.
//!
//! A sampling unit is one path, or one `(+Z, −Z)` pair when antithetic
//! sampling is on; standard errors are computed over units. Units are
//! processed in fixed-size chunks in parallel and reduced in chunk order, so
//! results are bit-identical for any thread count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::market::{check_time_grid, graded_grid, uniform_grid, MarketParams, Regime};
use crate::rng::StreamId;
use crate::strategy::{Feedback, Policy};

/// Share of the value the truncated tail may contribute under the default horizon.
pub const DEFAULT_TAIL_FRACTION: f64 = 1e-3;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub steps: usize,
    /// RK4 substeps per price interval for custom policies.
    pub substeps: usize,
    /// `None` applies the tail rule (negative drift only).
    pub horizon: Option<f64>,
    pub seed: u64,
    pub antithetic: bool,
    pub tail_fraction: f64,
    pub grid: GridKind,
}

/// Time discretization of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    /// Equal shares of `1 − e^{μt}` per step when `μ < 0`; uniform otherwise.
    #[default]
    Graded,
}

impl GridKind {
    pub fn build(self, params: &MarketParams, horizon: f64, steps: usize) -> Vec<f64> {
        match self {
            GridKind::Uniform => uniform_grid(horizon, steps),
            GridKind::Graded => graded_grid(horizon, steps, -params.mu),
        }
    }
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            steps: 512,
            substeps: 8,
            horizon: None,
            seed: 20240611,
            antithetic: true,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            grid: GridKind::Graded,
        }
    }
}

impl McConfig {
    fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::InvalidInput("need at least 2 paths".into()));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::InvalidInput("antithetic sampling needs an even number of paths".into()));
        }
        if self.steps == 0 || self.substeps == 0 {
            return Err(Error::InvalidInput("steps and substeps must be positive".into()));
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!("horizon must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn units(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }
}

/// Horizon `T` with `Φ₀S₀e^{μT} = fraction · S₀² g(Φ₀/S₀)`.
pub fn default_horizon(params: &MarketParams, value: f64, fraction: f64) -> Result<f64> {
    if params.regime().regime != Regime::NegativeDrift {
        return Err(Error::Config("the tail rule needs mu < 0; give an explicit horizon".into()));
    }
    let cap = params.phi0 * params.s0;
    if !(value > 0.0 && cap > 0.0) {
        return Err(Error::Config("the tail rule needs a positive position and value".into()));
    }
    Ok(((fraction * value / cap).ln() / params.mu).max(f64::MIN_POSITIVE))
}

/// `Φ₀S₀e^{μT}` for negative drift, `+∞` otherwise.
pub fn tail_bound(params: &MarketParams, horizon: f64) -> f64 {
    if params.regime().regime == Regime::NegativeDrift {
        params.phi0 * params.s0 * (params.mu * horizon).exp()
    } else {
        f64::INFINITY
    }
}

fn resolve_horizon(params: &MarketParams, policies: &[Policy], cfg: &McConfig) -> Result<f64> {
    if let Some(t) = cfg.horizon {
        return Ok(t);
    }
    let fb = policies
        .iter()
        .find_map(|p| p.feedback())
        .ok_or_else(|| Error::Config("no horizon given and no value function to apply the tail rule".into()))?;
    default_horizon(params, fb.value_of(params.phi0, params.s0), cfg.tail_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    /// From sums of `v − shift` and `(v − shift)²`.
    fn from_shifted_sums(sum: f64, sum_sq: f64, n: usize, shift: f64) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = ((sum_sq - sum * mean) / (nf - 1.0)).max(0.0);
        Self { mean: shift + mean, se: (var / nf).sqrt() }
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub params: MarketParams,
    pub policy: String,
    pub mean: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    pub n_paths: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// `Φ₀S₀e^{μT}`; `null` in JSON when unbounded.
    #[serde(with = "infinite_as_null")]
    pub tail_bound: f64,
    pub seed: u64,
    pub steps: usize,
    pub antithetic: bool,
    pub revenue: Summary,
    pub impact_cost: Summary,
    /// Set when the drift is positive and the value has no finite supremum.
    pub divergence_warning: bool,
}

impl McEstimate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Pathwise totals over `[0, T]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct PathStats {
    v: f64,
    revenue: f64,
    impact: f64,
    /// `Σ S_k² (g(x_k) − g(Φ_{k+1}/S_k))` for the tracked feedback.
    shadow: f64,
    /// Mean over left grid points of `−φ_{t_k} S_{t_k}`.
    rate_price: f64,
}

impl PathStats {
    fn scaled_add(&mut self, o: &PathStats, w: f64) {
        self.v += w * o.v;
        self.revenue += w * o.revenue;
        self.impact += w * o.impact;
        self.shadow += w * o.shadow;
        self.rate_price += w * o.rate_price;
    }
}

/// Per-policy path stats, then the sum and sum of squares of shifted `M` per grid time.
type RunOutput = (Vec<Vec<PathStats>>, Vec<f64>, Vec<f64>);

struct Job<'a> {
    params: &'a MarketParams,
    policies: &'a [Policy],
    grid: Vec<f64>,
    seed: u64,
    antithetic: bool,
    substeps: usize,
    /// Feedback whose `M_t` and shadow revenue are tracked along policy 0.
    track: Option<&'a Feedback>,
    rate_price: bool,
    /// Subtracted from `M` before accumulating moments.
    m_shift: f64,
}

#[derive(Default)]
struct ChunkOut {
    stats: Vec<Vec<PathStats>>,
    m_sum: Vec<f64>,
    m_sq: Vec<f64>,
}

impl Job<'_> {
    fn path(&self, policy: &Policy, normals: &[f64], sign: f64, m_out: Option<&mut [f64]>) -> Result<PathStats> {
        let p = self.params;
        let drift = p.mu - 0.5 * p.sigma * p.sigma;
        let n = self.grid.len() - 1;
        let phi0 = p.phi0;
        let mut s = p.s0;
        let mut phi = phi0;
        let (mut rev, mut sq, mut shadow, mut rp) = (0.0, 0.0, 0.0, 0.0);
        let track = self.track;
        let mut m_out = m_out;
        let need_all = m_out.is_some() || self.rate_price;
        for k in 0..n {
            let t = self.grid[k];
            let dt = self.grid[k + 1] - t;
            if self.rate_price {
                rp -= policy.rate(t, s, phi, phi0)? * s;
            }
            if let (Some(m), Some(fb)) = (m_out.as_deref_mut(), track) {
                m[k] = s * fb.g_prime(phi / s);
            }
            if phi > 0.0 {
                let inc = policy.advance(t, dt, s, phi, phi0, self.substeps)?;
                rev -= s * inc.d_phi;
                sq += inc.sq;
                let next = if inc.hit.is_some() { 0.0 } else { (phi + inc.d_phi).max(0.0) };
                if let Some(fb) = track {
                    shadow += s * s * (fb.g(phi / s) - fb.g(next / s));
                }
                phi = next;
            } else if !need_all {
                break;
            }
            s *= (p.sigma * dt.sqrt() * sign * normals[k] + drift * dt).exp();
        }
        if let (Some(m), Some(fb)) = (m_out, track) {
            m[n] = s * fb.g_prime(phi / s);
        }
        let impact = 0.5 * p.lambda_impact * sq;
        Ok(PathStats { v: rev - impact, revenue: rev, impact, shadow, rate_price: rp / n as f64 })
    }

    fn chunk(&self, range: std::ops::Range<usize>) -> Result<ChunkOut> {
        let n = self.grid.len() - 1;
        let mut normals = vec![0.0; n];
        let track_m = self.track.is_some();
        let mut out = ChunkOut {
            stats: vec![Vec::with_capacity(range.len()); self.policies.len()],
            m_sum: if track_m { vec![0.0; n + 1] } else { Vec::new() },
            m_sq: if track_m { vec![0.0; n + 1] } else { Vec::new() },
        };
        let mut m_a = vec![0.0; if track_m { n + 1 } else { 0 }];
        let mut m_b = m_a.clone();
        let signs: &[f64] = if self.antithetic { &[1.0, -1.0] } else { &[1.0] };
        let w = 1.0 / signs.len() as f64;
        for unit in range {
            StreamId::new(self.seed, unit as u64).fill_normals(&mut normals);
            for (pi, policy) in self.policies.iter().enumerate() {
                let mut acc = PathStats::default();
                for (si, &sign) in signs.iter().enumerate() {
                    let m =
                        if pi == 0 && track_m { Some(if si == 0 { &mut m_a[..] } else { &mut m_b[..] }) } else { None };
                    let st = self.path(policy, &normals, sign, m)?;
                    acc.scaled_add(&st, w);
                }
                out.stats[pi].push(acc);
            }
            if track_m {
                for k in 0..=n {
                    let v = if self.antithetic { 0.5 * (m_a[k] + m_b[k]) } else { m_a[k] } - self.m_shift;
                    out.m_sum[k] += v;
                    out.m_sq[k] += v * v;
                }
            }
        }
        Ok(out)
    }

    /// Per-policy unit statistics in unit order, plus summed M moments.
    fn run(&self, units: usize) -> Result<RunOutput> {
        let chunks: Vec<std::ops::Range<usize>> =
            (0..units).step_by(CHUNK).map(|a| a..(a + CHUNK).min(units)).collect();
        let outs: Vec<Result<ChunkOut>> = chunks.into_par_iter().map(|r| self.chunk(r)).collect();
        let mut stats = vec![Vec::with_capacity(units); self.policies.len()];
        let mut m_sum = Vec::new();
        let mut m_sq = Vec::new();
        for out in outs {
            let out = out?;
            for (dst, src) in stats.iter_mut().zip(out.stats) {
                dst.extend(src);
            }
            if m_sum.is_empty() {
                m_sum = out.m_sum;
                m_sq = out.m_sq;
            } else {
                for k in 0..m_sum.len() {
                    m_sum[k] += out.m_sum[k];
                    m_sq[k] += out.m_sq[k];
                }
            }
        }
        Ok((stats, m_sum, m_sq))
    }
}

/// Two-pass mean and standard error.
fn summary_of<I: Iterator<Item = f64> + Clone>(values: I) -> Summary {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let nf = n as f64;
    let mean = sum / nf;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    Summary { mean, se: (ss / (nf - 1.0) / nf).sqrt() }
}

fn summarize(units: &[PathStats], f: impl Fn(&PathStats) -> f64 + Clone) -> Summary {
    summary_of(units.iter().map(f))
}

fn prepare<'a>(params: &'a MarketParams, policies: &'a [Policy], cfg: &McConfig) -> Result<(Job<'a>, f64)> {
    params.validate()?;
    cfg.validate()?;
    for p in policies {
        p.validate(params)?;
    }
    let horizon = resolve_horizon(params, policies, cfg)?;
    let grid = cfg.grid.build(params, horizon, cfg.steps);
    check_time_grid(&grid)?;
    Ok((
        Job {
            params,
            policies,
            grid,
            seed: cfg.seed,
            antithetic: cfg.antithetic,
            substeps: cfg.substeps,
            track: None,
            rate_price: false,
            m_shift: 0.0,
        },
        horizon,
    ))
}

fn estimate_from(
    params: &MarketParams,
    policy: &Policy,
    cfg: &McConfig,
    horizon: f64,
    units: &[PathStats],
) -> McEstimate {
    let v = summarize(units, |u| u.v);
    McEstimate {
        params: *params,
        policy: policy.name(),
        mean: v.mean,
        se: v.se,
        ci95: [v.mean - 1.96 * v.se, v.mean + 1.96 * v.se],
        n_paths: cfg.n_paths,
        horizon,
        tail_bound: tail_bound(params, horizon),
        seed: cfg.seed,
        steps: cfg.steps,
        antithetic: cfg.antithetic,
        revenue: summarize(units, |u| u.revenue),
        impact_cost: summarize(units, |u| u.impact),
        divergence_warning: params.regime().regime == Regime::PositiveDrift,
    }
}

/// Estimates `E[V^φ]` over `[0, T]`.
pub fn estimate_value(params: &MarketParams, policy: &Policy, cfg: &McConfig) -> Result<McEstimate> {
    let policies = std::slice::from_ref(policy);
    let (job, horizon) = prepare(params, policies, cfg)?;
    let (stats, _, _) = job.run(cfg.units())?;
    Ok(estimate_from(params, policy, cfg, horizon, &stats[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub mean: f64,
    pub se: f64,
    /// `mean − reference mean`, paired over common paths.
    pub diff: f64,
    pub se_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub params: MarketParams,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// The first row is the reference (the first policy given).
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,mean,se,diff_vs_reference,se_diff\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.policy,
                fmt::num(r.mean),
                fmt::num(r.se),
                fmt::num(r.diff),
                fmt::num(r.se_diff)
            );
        }
        out
    }
}

/// Evaluates all policies on the same paths; differences are against the first.
pub fn compare_policies(params: &MarketParams, policies: &[Policy], cfg: &McConfig) -> Result<ComparisonTable> {
    if policies.len() < 2 {
        return Err(Error::InvalidInput("comparison needs at least two policies".into()));
    }
    let (job, horizon) = prepare(params, policies, cfg)?;
    let (stats, _, _) = job.run(cfg.units())?;
    let reference = &stats[0];
    let rows = policies
        .iter()
        .zip(&stats)
        .map(|(p, units)| {
            let v = summarize(units, |u| u.v);
            let d = summary_of(units.iter().zip(reference).map(|(a, b)| a.v - b.v));
            ComparisonRow { policy: p.name(), mean: v.mean, se: v.se, diff: d.mean, se_diff: d.se }
        })
        .collect();
    Ok(ComparisonTable { params: *params, horizon, n_paths: cfg.n_paths, seed: cfg.seed, rows })
}

/// Cross-sectional behaviour of `M_t = S_t g'(Φ_t/S_t)` under the optimal policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    pub mean_m: Vec<f64>,
    pub se_m: Vec<f64>,
    /// Grid times where `mean_{k+1} > mean_k + 2·se_{k+1}`.
    pub violations: usize,
    /// Largest `(mean_{k+1} − mean_k) / se_{k+1}`.
    pub max_z: f64,
    /// `M₀ = S₀ g'(Φ₀/S₀)`.
    pub m0: f64,
    /// Estimate of `E[−∫ φ M dt]` over `[0, T]`.
    pub shadow_revenue: Summary,
    /// `Φ₀ M₀`.
    pub target: f64,
    #[serde(with = "infinite_as_null")]
    pub tail_bound: f64,
    pub n_paths: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
}

pub fn supermartingale_check(
    params: &MarketParams,
    feedback: &Feedback,
    cfg: &McConfig,
) -> Result<SupermartingaleReport> {
    let policies = [Policy::OptimalFeedback(feedback.clone())];
    let (mut job, horizon) = prepare(params, &policies, cfg)?;
    let m0 = params.s0 * feedback.g_prime(params.phi0 / params.s0);
    job.track = Some(feedback);
    job.m_shift = m0;
    let units = cfg.units();
    let (stats, m_sum, m_sq) = job.run(units)?;
    let summaries: Vec<Summary> =
        m_sum.iter().zip(&m_sq).map(|(s, q)| Summary::from_shifted_sums(*s, *q, units, m0)).collect();
    let mut violations = 0;
    let mut max_z = f64::NEG_INFINITY;
    for k in 0..summaries.len() - 1 {
        let rise = summaries[k + 1].mean - summaries[k].mean;
        let se = summaries[k + 1].se;
        if rise > 2.0 * se {
            violations += 1;
        }
        let z = if se > 0.0 {
            rise / se
        } else if rise > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        max_z = max_z.max(z);
    }
    Ok(SupermartingaleReport {
        times: job.grid.clone(),
        mean_m: summaries.iter().map(|s| s.mean).collect(),
        se_m: summaries.iter().map(|s| s.se).collect(),
        violations,
        max_z,
        m0,
        shadow_revenue: summarize(&stats[0], |u| u.shadow),
        target: params.phi0 * m0,
        tail_bound: tail_bound(params, horizon),
        n_paths: cfg.n_paths,
        horizon,
    })
}

/// Positive-drift diagnostic for `φ_t = −μΦ₀e^{−μt}`: `E[−φ_t S_t] = μΦ₀S₀`
/// at every `t`, and `∫₀^∞ φ² dt = μΦ₀²/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveDriftReport {
    /// Time average over the grid of the MC mean of `−φ_t S_t`.
    pub rate_price: Summary,
    /// `μΦ₀S₀`.
    pub rate_price_target: f64,
    /// `∫₀^T φ² dt` from the execution engine plus the exact tail beyond `T`.
    pub squared_rate_integral: f64,
    /// `μΦ₀²/2`.
    pub squared_rate_target: f64,
    /// Mean of the truncated value; grows without bound in `T`.
    pub value: Summary,
    pub divergence_warning: bool,
    pub n_paths: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
}

pub fn positive_drift_check(params: &MarketParams, cfg: &McConfig) -> Result<PositiveDriftReport> {
    if params.regime().regime != Regime::PositiveDrift {
        return Err(Error::Regime("the positive-drift diagnostic needs mu > 0".into()));
    }
    let horizon = cfg.horizon.ok_or_else(|| Error::Config("positive drift needs an explicit horizon".into()))?;
    let policies = [Policy::ExponentialRate { c: params.mu }];
    let (mut job, horizon) = prepare(params, &policies, &McConfig { horizon: Some(horizon), ..*cfg })?;
    job.rate_price = true;
    let (stats, _, _) = job.run(cfg.units())?;
    // The open-loop schedule does not depend on the path.
    let phi0 = params.phi0;
    let mu = params.mu;
    let in_window = 0.5 * mu * phi0 * phi0 * -(-2.0 * mu * horizon).exp_m1();
    let tail = 0.5 * mu * phi0 * phi0 * (-2.0 * mu * horizon).exp();
    let engine = stats[0].first().map_or(0.0, |u| u.impact) / (0.5 * params.lambda_impact);
    debug_assert!((engine - in_window).abs() <= 1e-9 * in_window.max(1.0));
    Ok(PositiveDriftReport {
        rate_price: summarize(&stats[0], |u| u.rate_price),
        rate_price_target: mu * phi0 * params.s0,
        squared_rate_integral: engine + tail,
        squared_rate_target: 0.5 * mu * phi0 * phi0,
        value: summarize(&stats[0], |u| u.v),
        divergence_warning: true,
        n_paths: cfg.n_paths,
        horizon,
    })
}
