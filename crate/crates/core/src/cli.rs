//! Command-line front end.
//!
//! Every subcommand reads one JSON [`RunConfig`] (flags override it), writes
//! its artifacts under the output directory together with the resolved
//! config, and prints a single JSON summary line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::closed_form::{critical_value_function, g_table, h_table, CriticalParams};
use crate::dp_oracle::{march_hjb, HjbConfig};
use crate::error::Error;
use crate::market::{simulate_gbm, MarketParams, Regime};
use crate::monte_carlo::{compare_policies, estimate_value, GridKind, McConfig};
use crate::rng::StreamId;
use crate::strategy::{simulate_execution, supermartingale_diagnostic, Feedback, Policy, CRITICAL_TABLE_X_MAX};
use crate::value_ode::{integrate_value_ode, log_grid, SolverOptions, ValueFunction};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_REGIME: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "optexec", version, about = "Optimal execution under GBM with linear temporary impact")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for g and write it as JSON and CSV.
    Solve(Common),
    /// Tabulate the exact critical-case solution.
    ClosedForm(Common),
    /// Run one policy along one simulated price path.
    Simulate(Common),
    /// Monte Carlo estimate of one policy's expected value.
    Estimate(Common),
    /// Evaluate several policies on common paths.
    Compare(Common),
    /// March the finite-horizon HJB and compare with g.
    Oracle(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Optimal,
    Unscaled,
    Exponential {
        c: f64,
    },
    /// `c = 1/n`.
    SlowExponential {
        n: f64,
    },
    Constant {
        horizon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Defaults to the Monte Carlo horizon rule.
    pub horizon: Option<f64>,
    pub steps: usize,
    pub stream: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { horizon: None, steps: 2048, stream: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub steps: usize,
    pub substeps: usize,
    pub horizon: Option<f64>,
    pub antithetic: bool,
    pub tail_fraction: f64,
    pub grid: GridKind,
}

impl Default for McSection {
    fn default() -> Self {
        let d = McConfig::default();
        Self {
            n_paths: d.n_paths,
            steps: d.steps,
            substeps: d.substeps,
            horizon: d.horizon,
            antithetic: d.antithetic,
            tail_fraction: d.tail_fraction,
            grid: d.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedFormSection {
    /// Largest `x` of the `g` table; `h` is tabulated at `y = 1/x`.
    pub x_max: f64,
    pub points: usize,
}

impl Default for ClosedFormSection {
    fn default() -> Self {
        Self { x_max: 50.0, points: 512 }
    }
}

/// Complete description of a run. Persisted next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub params: MarketParams,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub solver: SolverOptions,
    pub monte_carlo: McSection,
    pub oracle: HjbConfig,
    pub closed_form: ClosedFormSection,
    pub simulate: SimulateConfig,
    /// Policy for `simulate` and `estimate`.
    pub policy: PolicySpec,
    /// Policies for `compare`; the first is the reference row.
    pub policies: Vec<PolicySpec>,
    /// Load `g` from this file instead of solving.
    pub value_function: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: MarketParams { mu: -0.125, sigma: 0.5, lambda_impact: 1.0, s0: 1.0, phi0: 1.0 },
            seed: McConfig::default().seed,
            output_dir: PathBuf::from("out"),
            solver: SolverOptions::default(),
            monte_carlo: McSection::default(),
            oracle: HjbConfig::default(),
            closed_form: ClosedFormSection::default(),
            simulate: SimulateConfig::default(),
            policy: PolicySpec::Optimal,
            policies: vec![
                PolicySpec::Optimal,
                PolicySpec::Exponential { c: 0.1 },
                PolicySpec::Exponential { c: 0.5 },
                PolicySpec::Exponential { c: 1.0 },
                PolicySpec::Exponential { c: 2.0 },
            ],
            value_function: None,
        }
    }
}

impl RunConfig {
    pub fn mc(&self) -> McConfig {
        let m = &self.monte_carlo;
        McConfig {
            n_paths: m.n_paths,
            steps: m.steps,
            substeps: m.substeps,
            horizon: m.horizon,
            seed: self.seed,
            antithetic: m.antithetic,
            tail_fraction: m.tail_fraction,
            grid: m.grid,
        }
    }
}

/// A failed run: exit code and message for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Json(_)
            | Error::Cfl { .. }
            | Error::CutoffTooLarge { .. } => EXIT_CONFIG,
            Error::Regime(_) => EXIT_REGIME,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_VALIDATION,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reads the config file (if any) and applies flag overrides.
pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::new(EXIT_CONFIG, format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.params.validate().map_err(|e| CliError::new(EXIT_CONFIG, format!("params: {e}")))?;
    Ok(cfg)
}

fn regime_message(params: &MarketParams) -> Option<&'static str> {
    match params.regime().regime {
        Regime::NegativeDrift => None,
        Regime::Martingale => Some("value equals Φ₀S₀ but no optimal policy exists at zero drift"),
        Regime::PositiveDrift => Some("value is infinite for positive drift"),
    }
}

fn require_negative_drift(params: &MarketParams) -> CliResult<()> {
    match regime_message(params) {
        Some(msg) => Err(CliError::new(EXIT_REGIME, msg)),
        None => Ok(()),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<String> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path.display().to_string())
}

fn prepare_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let resolved = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    write(&cfg.output_dir, "run_config.json", &resolved)?;
    Ok(cfg.output_dir.clone())
}

/// The feedback for `cfg.params`: loaded, closed form, or solved.
fn feedback(cfg: &RunConfig) -> CliResult<Feedback> {
    require_negative_drift(&cfg.params)?;
    if let Some(path) = &cfg.value_function {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_MISSING, format!("cannot read value function {}: {e}", path.display())))?;
        let vf = ValueFunction::from_json(&text)
            .map_err(|e| CliError::new(EXIT_MISSING, format!("unusable value function {}: {e}", path.display())))?;
        if !vf.params().same_dynamics(&cfg.params) {
            return Err(CliError::new(
                EXIT_MISSING,
                format!("value function {} was solved for different (mu, sigma, lambda)", path.display()),
            ));
        }
        return Ok(Feedback::solved(vf));
    }
    Ok(Feedback::for_params(&cfg.params, &cfg.solver)?)
}

fn needs_feedback(spec: &PolicySpec) -> bool {
    matches!(spec, PolicySpec::Optimal | PolicySpec::Unscaled)
}

fn build_policy(spec: &PolicySpec, fb: Option<&Feedback>) -> CliResult<Policy> {
    let fb = || fb.cloned().ok_or_else(|| CliError::new(EXIT_CONFIG, "feedback policy without a value function"));
    Ok(match spec {
        PolicySpec::Optimal => Policy::OptimalFeedback(fb()?),
        PolicySpec::Unscaled => Policy::UnscaledFeedback(fb()?),
        PolicySpec::Exponential { c } => Policy::ExponentialRate { c: *c },
        PolicySpec::SlowExponential { n } => Policy::slow_exponential(*n),
        PolicySpec::Constant { horizon } => Policy::ConstantRate { horizon: *horizon },
    })
}

fn policies_for(cfg: &RunConfig, specs: &[PolicySpec]) -> CliResult<Vec<Policy>> {
    let fb = if specs.iter().any(needs_feedback) { Some(feedback(cfg)?) } else { None };
    specs.iter().map(|s| build_policy(s, fb.as_ref())).collect()
}

pub fn cmd_solve(cfg: &RunConfig) -> CliResult<Value> {
    require_negative_drift(&cfg.params)?;
    let vf = integrate_value_ode(&cfg.params, &cfg.solver)?;
    let dir = prepare_dir(cfg)?;
    let report = vf.validate();
    let files = [write(&dir, "value_function.json", &vf.to_json()?)?, write(&dir, "value_function.csv", &vf.to_csv())?];
    let p = &cfg.params;
    let summary = json!({
        "command": "solve",
        "files": files,
        "validation": report,
        "passed": report.passed(cfg.solver.tol),
        "solver_meta": vf.solver_meta(),
        "g_at_x0": vf.g_at(p.phi0 / p.s0),
        "value": vf.value_of(p.phi0, p.s0),
    });
    if !report.passed(cfg.solver.tol) {
        return Err(CliError::new(EXIT_VALIDATION, format!("validation failed: {summary}")));
    }
    Ok(summary)
}

pub fn cmd_closed_form(cfg: &RunConfig) -> CliResult<Value> {
    let cp = CriticalParams::from_market(&cfg.params)?;
    let c = &cfg.closed_form;
    let dir = prepare_dir(cfg)?;
    let xs: Vec<f64> = log_grid(1e-6, c.x_max, c.points).into_iter().skip(1).collect();
    let ys: Vec<f64> = xs.iter().rev().map(|x| 1.0 / x).collect();
    let vf = critical_value_function(&cp, c.x_max.min(CRITICAL_TABLE_X_MAX), 2048)?;
    let files = [
        write(&dir, "g_closed_form.csv", &g_table(&xs, &cp))?,
        write(&dir, "h_closed_form.csv", &h_table(&ys, &cp)?)?,
        write(&dir, "value_function.json", &vf.to_json()?)?,
    ];
    let p = &cfg.params;
    Ok(json!({
        "command": "closed-form",
        "files": files,
        "h_at_lambda_sigma2": crate::closed_form::h_ratio(cp.lambda_impact * cp.sigma * cp.sigma, &cp)?,
        "value": p.s0 * p.s0 * crate::closed_form::g_critical(p.phi0 / p.s0, &cp),
        "residual_sup": vf.residual_sup(),
    }))
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<Value> {
    let policy = policies_for(cfg, std::slice::from_ref(&cfg.policy))?.remove(0);
    let horizon = match (cfg.simulate.horizon, policy.feedback()) {
        (Some(t), _) => t,
        (None, Some(fb)) => crate::monte_carlo::default_horizon(
            &cfg.params,
            fb.value_of(cfg.params.phi0, cfg.params.s0),
            cfg.monte_carlo.tail_fraction,
        )?,
        (None, None) => return Err(CliError::new(EXIT_CONFIG, "simulate.horizon is required for open-loop policies")),
    };
    if cfg.simulate.steps == 0 {
        return Err(CliError::new(EXIT_CONFIG, "simulate.steps must be positive"));
    }
    let grid = cfg.monte_carlo.grid.build(&cfg.params, horizon, cfg.simulate.steps);
    let path = simulate_gbm(&cfg.params, &grid, StreamId::new(cfg.seed, cfg.simulate.stream))?;
    let result = simulate_execution(&policy, &path, &cfg.params, cfg.monte_carlo.substeps)?;
    let m = match policy.feedback() {
        Some(fb) => Some(supermartingale_diagnostic(&result, fb)?),
        None => None,
    };
    let dir = prepare_dir(cfg)?;
    let file = write(&dir, "execution.csv", &result.to_csv(m.as_ref()))?;
    Ok(json!({
        "command": "simulate",
        "files": [file],
        "policy": result.policy,
        "T": horizon,
        "v_realized": result.v_realized,
        "revenue": result.revenue_cum.last(),
        "impact_cost": result.impact_cost_cum.last(),
        "hit_time": result.hit_time,
        "terminal_inventory": result.inventory.last(),
    }))
}

pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<Value> {
    let policy = policies_for(cfg, std::slice::from_ref(&cfg.policy))?.remove(0);
    let est = estimate_value(&cfg.params, &policy, &cfg.mc())?;
    let dir = prepare_dir(cfg)?;
    let file = write(&dir, "estimate.json", &est.to_json()?)?;
    let mut summary = serde_json::to_value(&est).map_err(Error::from)?;
    summary["command"] = json!("estimate");
    summary["files"] = json!([file]);
    Ok(summary)
}

pub fn cmd_compare(cfg: &RunConfig) -> CliResult<Value> {
    let policies = policies_for(cfg, &cfg.policies)?;
    let table = compare_policies(&cfg.params, &policies, &cfg.mc())?;
    let dir = prepare_dir(cfg)?;
    let files = [
        write(&dir, "comparison.csv", &table.to_csv())?,
        write(&dir, "comparison.json", &serde_json::to_string(&table).map_err(Error::from)?)?,
    ];
    Ok(json!({
        "command": "compare",
        "files": files,
        "T": table.horizon,
        "n_paths": table.n_paths,
        "rows": table.rows,
    }))
}

pub fn cmd_oracle(cfg: &RunConfig) -> CliResult<Value> {
    let fb = feedback(cfg)?;
    let grid = march_hjb(&cfg.params, &cfg.oracle)?;
    let hi = (0.2 * cfg.oracle.x_max).min(fb.value_function().x_max());
    let dev = grid.deviation(|x| fb.g(x), 0.1_f64.min(hi), hi);
    let dir = prepare_dir(cfg)?;
    let file = write(&dir, "hjb_grid.csv", &grid.to_csv())?;
    let p = &cfg.params;
    Ok(json!({
        "command": "oracle",
        "files": [file],
        "max_abs_deviation": dev.max_abs,
        "at_x": dev.at_x,
        "range": [dev.lo, dev.hi],
        "tail_certificate": p.phi0 * p.s0 * grid.tail_certificate(),
        "scheme": grid.meta,
    }))
}

/// Runs a parsed command; `Ok` holds the stdout summary.
pub fn run(cli: &Cli) -> CliResult<Value> {
    let (common, f): (&Common, fn(&RunConfig) -> CliResult<Value>) = match &cli.command {
        Command::Solve(c) => (c, cmd_solve),
        Command::ClosedForm(c) => (c, cmd_closed_form),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Estimate(c) => (c, cmd_estimate),
        Command::Compare(c) => (c, cmd_compare),
        Command::Oracle(c) => (c, cmd_oracle),
    };
    let cfg = load_config(common)?;
    f(&cfg)
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
