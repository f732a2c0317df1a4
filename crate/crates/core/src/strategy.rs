//! Running a liquidation policy along a price path.
//!
//! Within each price interval `[t_k, t_{k+1})` the price is held at `S_k`.
//! For the feedback policies the reduced state `x = Φ/S` then obeys the
//! autonomous ODE `dx/dt = −κ(1 − g'(x))`, which is integrated exactly
//! through its travel time `τ(x) = ∫₀ˣ du/(1 − g'(u))` ([`FlowMap`]); the
//! open-loop policies are integrated in closed form and custom policies by
//! classical RK4 substeps.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::closed_form::{critical_value_function, CriticalParams};
use crate::error::{Error, Result};
use crate::fmt;
use crate::market::{MarketParams, PricePath, Regime};
use crate::quad;
use crate::value_ode::{integrate_value_ode, BoundaryLayer, SolverOptions, ValueFunction};

/// Inventory below `ABSORB_REL · Φ₀` counts as liquidated for substepped policies.
pub const ABSORB_REL: f64 = 1e-12;
/// Upper end of the tabulated closed-form value function.
pub const CRITICAL_TABLE_X_MAX: f64 = 1e4;

pub type RateFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Travel time `τ(x) = ∫₀ˣ du / (1 − g'(u))` of the frozen-price flow and its inverse.
#[derive(Debug, Clone)]
pub struct FlowMap {
    x: Vec<f64>,
    tau: Vec<f64>,
    dtau: Vec<f64>,
    series: BoundaryLayer,
    beta: f64,
    gamma: f64,
}

impl FlowMap {
    pub fn new(vf: &ValueFunction) -> Self {
        let x: Vec<f64> = vf.x_grid()[1..].to_vec();
        let series = *vf.series();
        let beta = series.b / series.a;
        let gamma = beta * beta + series.c / series.a;
        let dtau: Vec<f64> = x.iter().map(|&v| 1.0 / (1.0 - vf.g_prime_at(v))).collect();
        let mut tau = vec![0.0; x.len()];
        let mut map = Self { x, tau: Vec::new(), dtau, series, beta, gamma };
        tau[0] = map.series_tau(map.x[0].sqrt());
        let f = |u: f64| 1.0 / (1.0 - vf.g_prime_at(u));
        for i in 0..map.x.len() - 1 {
            let (a, b) = (map.x[i], map.x[i + 1]);
            tau[i + 1] = tau[i] + quad::integrate(&f, a, b, 1e-15 * (1.0 + tau[i])).value;
        }
        map.tau = tau;
        map
    }

    fn series_tau(&self, s: f64) -> f64 {
        2.0 / self.series.a * s * (1.0 + s * (0.5 * self.beta + s * self.gamma / 3.0))
    }

    pub fn tau(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x <= 0.0 {
            0.0
        } else if x < self.x[0] {
            self.series_tau(x.sqrt())
        } else if x >= self.x[n - 1] {
            self.tau[n - 1] + (x - self.x[n - 1]) * self.dtau[n - 1]
        } else {
            let i = (self.x.partition_point(|&v| v <= x) - 1).min(n - 2);
            let h = self.x[i + 1] - self.x[i];
            hermite((x - self.x[i]) / h, h, self.tau[i], self.tau[i + 1], self.dtau[i], self.dtau[i + 1])
        }
    }

    /// `x` with `τ(x) = t`, for `t ≥ 0`.
    pub fn inverse(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= 0.0 {
            return 0.0;
        }
        if t < self.tau[0] {
            let mut s = 0.5 * self.series.a * t;
            for _ in 0..8 {
                let ds = 2.0 / self.series.a * (1.0 + s * (self.beta + s * self.gamma));
                let step = (self.series_tau(s) - t) / ds;
                s -= step;
                if step.abs() <= 1e-16 * s {
                    break;
                }
            }
            return (s * s).min(self.x[0]);
        }
        if t >= self.tau[n - 1] {
            return self.x[n - 1] + (t - self.tau[n - 1]) / self.dtau[n - 1];
        }
        let i = (self.tau.partition_point(|&v| v <= t) - 1).min(n - 2);
        let h = self.x[i + 1] - self.x[i];
        let (t0, t1, d0, d1) = (self.tau[i], self.tau[i + 1], self.dtau[i], self.dtau[i + 1]);
        // Newton on the monotone cubic, safeguarded by bisection.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut u = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        for _ in 0..50 {
            let f = hermite(u, h, t0, t1, d0, d1) - t;
            if f > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let df = hermite_slope(u, h, t0, t1, d0, d1);
            let mut next = u - f / df;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-16 {
                u = next;
                break;
            }
            u = next;
        }
        self.x[i] + u * h
    }
}

fn hermite(t: f64, h: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * h * d1
}

/// Derivative of [`hermite`] with respect to `t`.
fn hermite_slope(t: f64, h: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> f64 {
    let t2 = t * t;
    (6.0 * t2 - 6.0 * t) * (y0 - y1) + (3.0 * t2 - 4.0 * t + 1.0) * h * d0 + (3.0 * t2 - 2.0 * t) * h * d1
}

/// The value function behind a feedback policy, with its flow map.
#[derive(Debug, Clone)]
pub struct Feedback {
    vf: Arc<ValueFunction>,
    critical: Option<CriticalParams>,
    flow: Arc<FlowMap>,
}

impl Feedback {
    pub fn solved(vf: impl Into<Arc<ValueFunction>>) -> Self {
        let vf = vf.into();
        let flow = Arc::new(FlowMap::new(&vf));
        Self { vf, critical: None, flow }
    }

    /// Feedback from the exact critical-case solution, tabulated on `[0, 1e4]`.
    pub fn critical(p: CriticalParams) -> Result<Self> {
        let vf = critical_value_function(&p, CRITICAL_TABLE_X_MAX, 4096)?;
        let mut fb = Self::solved(vf);
        fb.critical = Some(p);
        Ok(fb)
    }

    /// Closed form in the critical case, the ODE solver otherwise.
    pub fn for_params(params: &MarketParams, opts: &SolverOptions) -> Result<Self> {
        let info = params.regime();
        if info.regime != Regime::NegativeDrift {
            return Err(Error::Regime("a feedback policy needs mu < 0".into()));
        }
        if info.critical {
            Self::critical(CriticalParams::from_market(params)?)
        } else {
            Ok(Self::solved(integrate_value_ode(params, opts)?))
        }
    }

    pub fn value_function(&self) -> &ValueFunction {
        &self.vf
    }

    pub fn critical_params(&self) -> Option<CriticalParams> {
        self.critical
    }

    pub fn flow(&self) -> &FlowMap {
        &self.flow
    }

    pub fn lambda(&self) -> f64 {
        self.vf.params().lambda_impact
    }

    pub fn g(&self, x: f64) -> f64 {
        self.vf.g_at(x)
    }

    pub fn g_prime(&self, x: f64) -> f64 {
        self.vf.g_prime_at(x)
    }

    pub fn value_of(&self, phi0: f64, s0: f64) -> f64 {
        self.vf.value_of(phi0, s0)
    }

    /// Same `μ, σ, Λ` as `params`.
    pub fn matches(&self, params: &MarketParams) -> bool {
        self.vf.params().same_dynamics(params)
    }
}

#[derive(Clone)]
pub enum Policy {
    /// `φ = −(S/Λ)(1 − g'(Φ/S))`.
    OptimalFeedback(Feedback),
    /// `φ = −S(1 − g'(Φ/S))`, the same feedback without the `1/Λ` factor.
    UnscaledFeedback(Feedback),
    /// `φ_t = −c Φ₀ e^{−ct}`.
    ExponentialRate { c: f64 },
    /// `φ_t = −Φ₀/T` on `[0, T)`.
    ConstantRate { horizon: f64 },
    /// Any rate `f(t, S, Φ) ≤ 0`; integrated by RK4 substeps.
    Custom { name: String, rate: RateFn },
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Effect of a policy over one price interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Increment {
    /// Change in inventory (≤ 0).
    pub d_phi: f64,
    /// `∫φ² dt` over the interval.
    pub sq: f64,
    /// Absolute time at which the inventory reached zero, if it did.
    pub hit: Option<f64>,
}

const NO_TRADE: Increment = Increment { d_phi: 0.0, sq: 0.0, hit: None };

impl Policy {
    pub fn custom(name: impl Into<String>, rate: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Policy::Custom { name: name.into(), rate: Arc::new(rate) }
    }

    /// `φⁿ_t = −Φ₀ e^{−t/n}/n`.
    pub fn slow_exponential(n: f64) -> Self {
        Policy::ExponentialRate { c: 1.0 / n }
    }

    pub fn name(&self) -> String {
        match self {
            Policy::OptimalFeedback(_) => "optimal".into(),
            Policy::UnscaledFeedback(_) => "unscaled_feedback".into(),
            Policy::ExponentialRate { c } => format!("exponential(c={c})"),
            Policy::ConstantRate { horizon } => format!("constant(T={horizon})"),
            Policy::Custom { name, .. } => name.clone(),
        }
    }

    pub fn feedback(&self) -> Option<&Feedback> {
        match self {
            Policy::OptimalFeedback(fb) | Policy::UnscaledFeedback(fb) => Some(fb),
            _ => None,
        }
    }

    /// Checks the policy's own parameters and that a feedback policy was built for `params`.
    pub fn validate(&self, params: &MarketParams) -> Result<()> {
        match self {
            Policy::OptimalFeedback(fb) | Policy::UnscaledFeedback(fb) => {
                if !fb.matches(params) {
                    return Err(Error::Config(
                        "feedback value function was solved for different (mu, sigma, lambda)".into(),
                    ));
                }
            }
            Policy::ExponentialRate { c } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidInput(format!("exponential rate needs c > 0, got {c}")));
                }
            }
            Policy::ConstantRate { horizon } => {
                if !(*horizon > 0.0 && horizon.is_finite()) {
                    return Err(Error::InvalidInput(format!("constant rate needs T > 0, got {horizon}")));
                }
            }
            Policy::Custom { .. } => {}
        }
        Ok(())
    }

    fn kappa(&self, fb: &Feedback) -> f64 {
        match self {
            Policy::OptimalFeedback(_) => 1.0 / fb.lambda(),
            _ => 1.0,
        }
    }

    /// Instantaneous rate at time `t` (measured from the start of execution).
    pub fn rate(&self, t: f64, s: f64, phi: f64, phi0: f64) -> Result<f64> {
        if phi <= 0.0 {
            return Ok(0.0);
        }
        let r = match self {
            Policy::OptimalFeedback(fb) | Policy::UnscaledFeedback(fb) => {
                -self.kappa(fb) * s * (1.0 - fb.g_prime(phi / s))
            }
            Policy::ExponentialRate { c } => -c * phi0 * (-c * t).exp(),
            Policy::ConstantRate { horizon } => {
                if t < *horizon {
                    -phi0 / horizon
                } else {
                    0.0
                }
            }
            Policy::Custom { rate, .. } => rate(t, s, phi),
        };
        if r > 0.0 || r.is_nan() {
            return Err(Error::Admissibility { t, rate: r });
        }
        Ok(r)
    }

    /// Advances the inventory over `[t, t + dt)` at the frozen price `s`.
    pub(crate) fn advance(&self, t: f64, dt: f64, s: f64, phi: f64, phi0: f64, substeps: usize) -> Result<Increment> {
        if phi <= 0.0 || dt <= 0.0 {
            return Ok(NO_TRADE);
        }
        match self {
            Policy::OptimalFeedback(fb) | Policy::UnscaledFeedback(fb) => {
                let kappa = self.kappa(fb);
                let flow = fb.flow();
                let x = phi / s;
                let tau0 = flow.tau(x);
                let tau1 = tau0 - kappa * dt;
                let (x1, d_phi, hit) = if tau1 <= 0.0 {
                    (0.0, -phi, Some(t + tau0 / kappa))
                } else {
                    let x1 = flow.inverse(tau1).min(x);
                    (x1, s * x1 - phi, None)
                };
                let sq = s * s * kappa * ((x - x1) - (fb.g(x) - fb.g(x1)));
                Ok(Increment { d_phi: d_phi.min(0.0), sq: sq.max(0.0), hit })
            }
            Policy::ExponentialRate { c } => {
                let e0 = (-c * t).exp();
                let d_phi = (phi0 * e0 * (-c * dt).exp_m1()).max(-phi);
                let sq = 0.5 * c * phi0 * phi0 * e0 * e0 * -(-2.0 * c * dt).exp_m1();
                Ok(Increment { d_phi, sq, hit: None })
            }
            Policy::ConstantRate { horizon } => {
                let overlap = ((t + dt).min(*horizon) - t).max(0.0);
                if overlap == 0.0 {
                    return Ok(NO_TRADE);
                }
                let ends = t + dt >= *horizon;
                let d_phi = if ends { -phi } else { (-phi0 * overlap / horizon).max(-phi) };
                let sq = phi0 * phi0 * overlap / (horizon * horizon);
                Ok(Increment { d_phi, sq, hit: ends.then_some(*horizon) })
            }
            Policy::Custom { .. } => self.advance_rk4(t, dt, s, phi, phi0, substeps.max(1)),
        }
    }

    fn advance_rk4(&self, t: f64, dt: f64, s: f64, phi: f64, phi0: f64, substeps: usize) -> Result<Increment> {
        let h = dt / substeps as f64;
        let mut y = phi;
        let mut sq = 0.0;
        for j in 0..substeps {
            let t0 = t + j as f64 * h;
            let r = |tt: f64, yy: f64| self.rate(tt, s, yy.max(0.0), phi0);
            let k1 = r(t0, y)?;
            let k2 = r(t0 + 0.5 * h, y + 0.5 * h * k1)?;
            let k3 = r(t0 + 0.5 * h, y + 0.5 * h * k2)?;
            let k4 = r(t0 + h, y + h * k3)?;
            let dy = h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
            let dq = h * (k1 * k1 + 2.0 * k2 * k2 + 2.0 * k3 * k3 + k4 * k4) / 6.0;
            let next = y + dy;
            if next <= ABSORB_REL * phi0 {
                let theta = if dy < 0.0 { (y / -dy).clamp(0.0, 1.0) } else { 1.0 };
                sq += theta * dq;
                return Ok(Increment { d_phi: -phi, sq, hit: Some(t0 + theta * h) });
            }
            y = next;
            sq += dq;
        }
        Ok(Increment { d_phi: (y - phi).min(0.0), sq, hit: None })
    }
}

/// Trajectory of one execution on a price grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    pub policy: String,
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
    /// Rate at each grid time (≤ 0).
    pub rate: Vec<f64>,
    pub inventory: Vec<f64>,
    /// `−∫ φ S dt` so far.
    pub revenue_cum: Vec<f64>,
    /// `(Λ/2) ∫ φ² dt` so far.
    pub impact_cost_cum: Vec<f64>,
    pub v_realized: f64,
    /// First time the inventory reached zero; `None` if it never did on the grid.
    pub hit_time: Option<f64>,
}

impl ExecutionResult {
    /// CSV `t,S,phi_rate,inventory,revenue_cum,impact_cost_cum,M`; `M` is
    /// `nan` unless a diagnostic is supplied.
    pub fn to_csv(&self, m: Option<&SupermartingalePath>) -> String {
        let mut out = String::from("t,S,phi_rate,inventory,revenue_cum,impact_cost_cum,M\n");
        for k in 0..self.times.len() {
            let mv = m.map_or(f64::NAN, |m| m.m[k]);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt::num(self.times[k]),
                fmt::num(self.prices[k]),
                fmt::num(self.rate[k]),
                fmt::num(self.inventory[k]),
                fmt::num(self.revenue_cum[k]),
                fmt::num(self.impact_cost_cum[k]),
                fmt::num(mv)
            );
        }
        out
    }
}

/// Runs `policy` from `params.phi0` along `path`.
pub fn simulate_execution(
    policy: &Policy,
    path: &PricePath,
    params: &MarketParams,
    substeps: usize,
) -> Result<ExecutionResult> {
    params.validate()?;
    policy.validate(params)?;
    if substeps == 0 {
        return Err(Error::InvalidInput("substeps must be at least 1".into()));
    }
    if path.is_empty() {
        return Err(Error::InvalidInput("empty price path".into()));
    }
    let n = path.len();
    let t0 = path.times[0];
    let phi0 = params.phi0;
    let lam = params.lambda_impact;
    let mut rate = vec![0.0; n];
    let mut inventory = vec![0.0; n];
    let mut revenue = vec![0.0; n];
    let mut impact = vec![0.0; n];
    let mut hit_time = if phi0 == 0.0 { Some(t0) } else { None };
    let mut phi = phi0;
    let (mut rev, mut sq) = (0.0, 0.0);
    inventory[0] = phi0;
    for k in 0..n {
        let s = path.prices[k];
        rate[k] = policy.rate(path.times[k] - t0, s, phi, phi0)?;
        if k + 1 == n {
            break;
        }
        let dt = path.times[k + 1] - path.times[k];
        let inc = policy.advance(path.times[k] - t0, dt, s, phi, phi0, substeps)?;
        rev -= s * inc.d_phi;
        sq += inc.sq;
        phi = if inc.hit.is_some() { 0.0 } else { (phi + inc.d_phi).max(0.0) };
        if let (Some(h), None) = (inc.hit, hit_time) {
            hit_time = Some(h + t0);
        }
        inventory[k + 1] = phi;
        revenue[k + 1] = rev;
        impact[k + 1] = 0.5 * lam * sq;
    }
    Ok(ExecutionResult {
        policy: policy.name(),
        times: path.times.clone(),
        prices: path.prices.clone(),
        rate,
        inventory,
        v_realized: revenue[n - 1] - impact[n - 1],
        revenue_cum: revenue,
        impact_cost_cum: impact,
        hit_time,
    })
}

/// `M_t = S_t g'(Φ_t/S_t)` along an execution, with the shadow revenue
/// `−∫ φ M dt` accumulated per interval as `S_k² (g(x_k) − g(Φ_{k+1}/S_k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingalePath {
    pub times: Vec<f64>,
    pub m: Vec<f64>,
    pub shadow_revenue_cum: Vec<f64>,
}

pub fn supermartingale_diagnostic(result: &ExecutionResult, feedback: &Feedback) -> Result<SupermartingalePath> {
    let n = result.times.len();
    if result.prices.len() != n || result.inventory.len() != n {
        return Err(Error::InvalidInput("execution arrays have mismatched lengths".into()));
    }
    let mut m = vec![0.0; n];
    let mut shadow = vec![0.0; n];
    for k in 0..n {
        let s = result.prices[k];
        m[k] = s * feedback.g_prime(result.inventory[k] / s);
        if k + 1 < n {
            let step = s * s * (feedback.g(result.inventory[k] / s) - feedback.g(result.inventory[k + 1] / s));
            shadow[k + 1] = shadow[k] + step;
        }
    }
    Ok(SupermartingalePath { times: result.times.clone(), m, shadow_revenue_cum: shadow })
}
