//! Data-driven cross-module checks.
//!
//! Each fixture names market parameters, a check and its tolerance. Fixtures
//! live as JSON under `fixtures/` so other implementations can reuse them.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::{g_critical, g_prime_critical, h_ratio, CriticalParams};
use crate::dp_oracle::{march_hjb, HjbConfig};
use crate::error::{Error, Result};
use crate::market::MarketParams;
use crate::monte_carlo::{compare_policies, estimate_value, positive_drift_check, supermartingale_check, McConfig};
use crate::strategy::{Feedback, Policy};
use crate::value_ode::{integrate_value_ode, log_grid, SolverOptions, ValueFunction};

/// Directory holding the bundled fixtures.
pub const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub name: String,
    pub value: f64,
    /// Where the number comes from.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// `max |g_ode − g_critical|` over log-spaced points of `[lo, hi]`.
    ClosedFormVsOde { lo: f64, hi: f64, points: usize },
    /// `h(Λσ²)` against partial sums of `I₁(2)` and `I₀(2)`.
    BesselRatio { terms: usize },
    /// Scaled residual and boundary values of the solved `g`.
    OdeResidual,
    /// `(1 − g'(x))/√x` against `√(2Λ|μ|)`, relative.
    BoundaryLayer { x: f64 },
    /// `max |u(0,x) − g(x)|` over grid nodes in `[lo, hi]`.
    HjbAgreement { oracle: HjbConfig, lo: f64, hi: f64 },
    /// MC value of the optimal policy against `S₀² g(Φ₀/S₀)`.
    McOptimality { n_paths: usize },
    /// Optimal against exponential schedules under common paths.
    Dominance { rates: Vec<f64>, n_paths: usize },
    /// Zero drift: `φⁿ` estimates increase in `n`, stay below `Φ₀S₀ + 2SE`,
    /// and the last reaches `floor · Φ₀S₀`.
    Martingale { ns: Vec<f64>, horizon: f64, n_paths: usize, floor: f64 },
    /// Positive drift with `φ_t = −μΦ₀e^{−μt}`.
    PositiveDrift { horizon: f64, n_paths: usize },
    /// Mean of `M_t` non-increasing and shadow revenue equal to `Φ₀M₀`.
    Supermartingale { n_paths: usize },
    /// `(Φ₀, S₀) → (kΦ₀, kS₀)` multiplies values by `k²`.
    Scaling { small: [f64; 2], large: [f64; 2], n_paths: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    /// Acceptance criterion number, if the fixture is one.
    #[serde(default)]
    pub criterion: Option<u32>,
    pub description: String,
    /// Parameter sets; most checks use one, the boundary layer check several.
    pub params: Vec<MarketParams>,
    pub check: Check,
    #[serde(default)]
    pub expected: Vec<Expected>,
    pub tolerance: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub criterion: Option<u32>,
    pub passed: bool,
    /// The quantity compared against `bound`.
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub entries: Vec<Entry>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>4} {:>6} {:>12} {:>12} {:>8}\n",
            "fixture", "crit", "result", "measured", "bound", "seconds"
        );
        for e in &self.entries {
            let crit = e.criterion.map_or("-".to_string(), |c| c.to_string());
            let _ = writeln!(
                out,
                "{:<40} {:>4} {:>6} {:>12.4e} {:>12.4e} {:>8.1}  {}",
                e.name,
                crit,
                if e.passed { "PASS" } else { "FAIL" },
                e.measured,
                e.bound,
                e.seconds,
                e.detail
            );
        }
        out
    }
}

/// Reads every `*.json` fixture in `dir`, sorted by name.
pub fn load_fixtures(dir: impl AsRef<Path>) -> Result<Vec<Fixture>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path)?;
            let f: Fixture =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("fixture {}: {e}", path.display())))?;
            out.push(f);
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

struct Outcome {
    passed: bool,
    measured: f64,
    bound: f64,
    detail: String,
}

fn first(f: &Fixture) -> Result<&MarketParams> {
    f.params.first().ok_or_else(|| Error::Config(format!("fixture {} has no params", f.name)))
}

fn expected(f: &Fixture, name: &str) -> Result<f64> {
    f.expected
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.value)
        .ok_or_else(|| Error::Config(format!("fixture {} lacks expected value {name}", f.name)))
}

fn solve(p: &MarketParams) -> Result<ValueFunction> {
    integrate_value_ode(p, &SolverOptions::default())
}

fn mc(f: &Fixture, n_paths: usize) -> McConfig {
    let d = McConfig::default();
    McConfig { n_paths, seed: f.seed.unwrap_or(d.seed), ..d }
}

/// `I₁(2)/I₀(2)` from `terms` terms of each power series.
pub fn bessel_ratio_partial_sums(terms: usize) -> f64 {
    let (mut num, mut den, mut fact) = (0.0, 0.0, 1.0);
    for n in 0..terms {
        if n > 0 {
            fact *= n as f64;
        }
        let t = 1.0 / (fact * fact);
        den += t;
        num += t / (n + 1) as f64;
    }
    num / den
}

fn evaluate(f: &Fixture) -> Result<Outcome> {
    let tol = f.tolerance;
    match &f.check {
        Check::ClosedFormVsOde { lo, hi, points } => {
            let p = first(f)?;
            let cp = CriticalParams::from_market(p)?;
            let vf = solve(p)?;
            let xs = log_grid(*lo, *hi, points + 1);
            let (mut dev, mut at) = (0.0f64, f64::NAN);
            for &x in &xs[1..] {
                let d = (vf.g_at(x) - g_critical(x, &cp)).abs();
                if d > dev {
                    dev = d;
                    at = x;
                }
            }
            Ok(Outcome { passed: dev <= tol, measured: dev, bound: tol, detail: format!("worst at x={at:.4}") })
        }
        Check::BesselRatio { terms } => {
            let p = first(f)?;
            let cp = CriticalParams::from_market(p)?;
            let computed = h_ratio(p.lambda_impact * p.sigma * p.sigma, &cp)?;
            let sums = bessel_ratio_partial_sums(*terms);
            let reference = expected(f, "h")?;
            let dev = (computed - sums).abs().max((computed - reference).abs());
            Ok(Outcome {
                passed: dev <= tol && *terms >= 12,
                measured: dev,
                bound: tol,
                detail: format!("h={computed:.12} partial sums={sums:.12} reference={reference}"),
            })
        }
        Check::OdeResidual => {
            let mut worst = 0.0f64;
            let mut ok = true;
            let mut detail = String::new();
            for p in &f.params {
                let vf = solve(p)?;
                let r = vf.validate();
                let boundary = vf.g()[0] == 0.0 && vf.g_prime()[0] == 1.0;
                ok &= r.monotone && r.concave && r.bounds_ok && boundary;
                worst = worst.max(r.residual_sup);
                let _ = write!(detail, "mu={} sigma={}: {:.2e}; ", p.mu, p.sigma, r.residual_sup);
            }
            Ok(Outcome { passed: ok && worst <= tol, measured: worst, bound: tol, detail })
        }
        Check::BoundaryLayer { x } => {
            let mut worst = 0.0f64;
            let mut detail = String::new();
            for p in &f.params {
                let vf = solve(p)?;
                let ratio = (1.0 - vf.g_prime_at(*x)) / x.sqrt();
                let a = (2.0 * p.lambda_impact * p.mu.abs()).sqrt();
                let rel = (ratio / a - 1.0).abs();
                worst = worst.max(rel);
                let _ = write!(detail, "mu={} sigma={}: ratio={ratio:.6} a={a:.6}", p.mu, p.sigma);
                if let Ok(cp) = CriticalParams::from_market(p) {
                    let d = (vf.g_prime_at(*x) - g_prime_critical(*x, &cp)).abs();
                    let _ = write!(detail, " |g'-closed form|={d:.1e}");
                    if d > 1e-6 {
                        worst = f64::INFINITY;
                    }
                }
                detail.push_str("; ");
            }
            Ok(Outcome { passed: worst <= tol, measured: worst, bound: tol, detail })
        }
        Check::HjbAgreement { oracle, lo, hi } => {
            let p = first(f)?;
            let vf = solve(p)?;
            let grid = march_hjb(p, oracle)?;
            let dev = grid.deviation(|x| vf.g_at(x), *lo, *hi);
            let cert = p.phi0 * p.s0 * grid.tail_certificate();
            Ok(Outcome {
                passed: dev.max_abs <= tol,
                measured: dev.max_abs,
                bound: tol,
                detail: format!("at x={:.4}, nt={}, tail certificate {cert:.3e}", dev.at_x, grid.meta.nt),
            })
        }
        Check::McOptimality { n_paths } => {
            let p = first(f)?;
            let vf = solve(p)?;
            let target = vf.value_of(p.phi0, p.s0);
            let est = estimate_value(p, &Policy::OptimalFeedback(Feedback::solved(vf)), &mc(f, *n_paths))?;
            let bound = 2.0 * est.se + est.tail_bound;
            let dev = (est.mean - target).abs();
            Ok(Outcome {
                passed: dev <= bound,
                measured: dev,
                bound,
                detail: format!("mean={:.6} se={:.2e} target={target:.6} T={:.2}", est.mean, est.se, est.horizon),
            })
        }
        Check::Dominance { rates, n_paths } => {
            let p = first(f)?;
            let fb = Feedback::for_params(p, &SolverOptions::default())?;
            let mut policies = vec![Policy::OptimalFeedback(fb)];
            policies.extend(rates.iter().map(|&c| Policy::ExponentialRate { c }));
            let table = compare_policies(p, &policies, &mc(f, *n_paths))?;
            // Smallest margin of (optimal − alternative) above −2·SE_diff, in SE units.
            let mut worst = f64::INFINITY;
            let mut detail = String::new();
            for row in &table.rows[1..] {
                let z = -row.diff / row.se_diff;
                worst = worst.min(z);
                let _ = write!(detail, "{}: {:+.4} (se {:.1e}); ", row.policy, -row.diff, row.se_diff);
            }
            Ok(Outcome { passed: worst >= -2.0, measured: worst, bound: -2.0, detail })
        }
        Check::Martingale { ns, horizon, n_paths, floor } => {
            let p = first(f)?;
            let cap = p.phi0 * p.s0;
            let cfg = McConfig { horizon: Some(*horizon), ..mc(f, *n_paths) };
            let mut means = Vec::new();
            let mut ok = true;
            let mut detail = String::new();
            for &n in ns {
                let est = estimate_value(p, &Policy::slow_exponential(n), &cfg)?;
                ok &= est.mean <= cap + 2.0 * est.se;
                if let Some(prev) = means.last() {
                    ok &= est.mean > *prev;
                }
                let _ = write!(detail, "n={n}: {:.5}±{:.1e}; ", est.mean, est.se);
                means.push(est.mean);
            }
            let last = *means.last().unwrap_or(&f64::NAN);
            ok &= last >= floor * cap;
            Ok(Outcome { passed: ok, measured: last, bound: floor * cap, detail })
        }
        Check::PositiveDrift { horizon, n_paths } => {
            let p = first(f)?;
            let r = positive_drift_check(p, &McConfig { horizon: Some(*horizon), ..mc(f, *n_paths) })?;
            let dev = (r.rate_price.mean - r.rate_price_target).abs();
            let sq_dev = (r.squared_rate_integral - r.squared_rate_target).abs();
            Ok(Outcome {
                passed: dev <= 2.0 * r.rate_price.se && sq_dev <= tol * r.squared_rate_target,
                measured: dev,
                bound: 2.0 * r.rate_price.se,
                detail: format!(
                    "E[-phi S]={:.6} target={:.6}; int phi^2={:.15} target={:.15}",
                    r.rate_price.mean, r.rate_price_target, r.squared_rate_integral, r.squared_rate_target
                ),
            })
        }
        Check::Supermartingale { n_paths } => {
            let p = first(f)?;
            let fb = Feedback::for_params(p, &SolverOptions::default())?;
            let r = supermartingale_check(p, &fb, &mc(f, *n_paths))?;
            let bound = 2.0 * r.shadow_revenue.se + r.tail_bound;
            let dev = (r.shadow_revenue.mean - r.target).abs();
            Ok(Outcome {
                passed: r.violations == 0 && dev <= bound,
                measured: dev,
                bound,
                detail: format!(
                    "violations={} max rise/se={:.2}; shadow={:.6} target={:.6}",
                    r.violations, r.max_z, r.shadow_revenue.mean, r.target
                ),
            })
        }
        Check::Scaling { small, large, n_paths } => {
            let base = first(f)?;
            let ps = base.with_position(small[1], small[0])?;
            let pl = base.with_position(large[1], large[0])?;
            let k2 = (large[1] / small[1]).powi(2);
            let vs = solve(&ps)?;
            let vl = solve(&pl)?;
            let solve_dev = (vl.value_of(pl.phi0, pl.s0) - k2 * vs.value_of(ps.phi0, ps.s0)).abs();
            let cfg = mc(f, *n_paths);
            let es = estimate_value(&ps, &Policy::OptimalFeedback(Feedback::solved(vs)), &cfg)?;
            let el = estimate_value(&pl, &Policy::OptimalFeedback(Feedback::solved(vl)), &cfg)?;
            let mc_dev = (el.mean - k2 * es.mean).abs().max((el.se - k2 * es.se).abs());
            let dev = solve_dev.max(mc_dev);
            Ok(Outcome {
                passed: dev <= tol,
                measured: dev,
                bound: tol,
                detail: format!("solve diff {solve_dev:e}, mc diff {mc_dev:e}, small mean {:.6}", es.mean),
            })
        }
    }
}

/// Runs one fixture. Errors become failed entries.
pub fn run_fixture(f: &Fixture) -> Entry {
    let start = Instant::now();
    let (passed, measured, bound, detail) = match evaluate(f) {
        Ok(o) => (o.passed, o.measured, o.bound, o.detail),
        Err(e) => (false, f64::NAN, f.tolerance, format!("error: {e}")),
    };
    Entry {
        name: f.name.clone(),
        criterion: f.criterion,
        passed,
        measured,
        bound,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs all fixtures; the report is ordered by fixture name.
pub fn run_all(fixtures: &[Fixture]) -> Report {
    let mut entries: Vec<Entry> = fixtures.par_iter().map(run_fixture).collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    Report { entries }
}
