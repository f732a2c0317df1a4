//! Python bindings: `import pyoptexec`.

use std::sync::Arc;

use optexec::closed_form::{self, CriticalParams};
use optexec::market::{self, uniform_grid, PricePath};
use optexec::monte_carlo::{self, GridKind, McConfig};
use optexec::rng::StreamId;
use optexec::strategy::{self, Feedback};
use optexec::value_ode::{self, SolverOptions};
use optexec::{dp_oracle, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_)
        | Error::Config(_)
        | Error::Regime(_)
        | Error::CutoffTooLarge { .. }
        | Error::Cfl { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn json_of<T: serde::Serialize>(v: &T) -> PyResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(name = "MarketParams", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyMarketParams(market::MarketParams);

#[pymethods]
impl PyMarketParams {
    #[new]
    #[pyo3(signature = (mu, sigma, lambda_impact, s0 = 1.0, phi0 = 1.0))]
    fn new(mu: f64, sigma: f64, lambda_impact: f64, s0: f64, phi0: f64) -> PyResult<Self> {
        market::MarketParams::new(mu, sigma, lambda_impact, s0, phi0).map(Self).map_err(err)
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }
    #[getter]
    fn lambda_impact(&self) -> f64 {
        self.0.lambda_impact
    }
    #[getter]
    fn s0(&self) -> f64 {
        self.0.s0
    }
    #[getter]
    fn phi0(&self) -> f64 {
        self.0.phi0
    }

    /// "NegativeDrift", "Martingale" or "PositiveDrift".
    fn regime(&self) -> String {
        format!("{:?}", self.0.regime().regime)
    }

    fn is_critical(&self) -> bool {
        self.0.regime().critical
    }

    fn with_position(&self, s0: f64, phi0: f64) -> PyResult<Self> {
        self.0.with_position(s0, phi0).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        let p = self.0;
        format!(
            "MarketParams(mu={}, sigma={}, lambda_impact={}, s0={}, phi0={})",
            p.mu, p.sigma, p.lambda_impact, p.s0, p.phi0
        )
    }
}

/// Solved or closed-form `g` together with the optimal feedback built from it.
#[pyclass(name = "ValueFunction", frozen)]
struct PyValueFunction(Feedback);

#[pymethods]
impl PyValueFunction {
    /// Solves the ODE (closed form when `2μ+σ² = 0` and `closed_form` is true).
    #[staticmethod]
    #[pyo3(signature = (params, tol = 1e-10, x_max = 50.0, n_grid = 2048, closed_form = true))]
    fn solve(
        py: Python<'_>,
        params: PyMarketParams,
        tol: f64,
        x_max: f64,
        n_grid: usize,
        closed_form: bool,
    ) -> PyResult<Self> {
        let opts = SolverOptions { tol, x_max, n_grid, ..Default::default() };
        py.detach(|| {
            if closed_form {
                Feedback::for_params(&params.0, &opts)
            } else {
                value_ode::integrate_value_ode(&params.0, &opts).map(Feedback::solved)
            }
        })
        .map(Self)
        .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        value_ode::ValueFunction::from_json(text).map(|v| Self(Feedback::solved(v))).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.value_function().to_json().map_err(err)
    }

    fn g(&self, x: f64) -> f64 {
        self.0.g(x)
    }

    fn g_prime(&self, x: f64) -> f64 {
        self.0.g_prime(x)
    }

    /// `S₀² g(Φ₀/S₀)`.
    fn value(&self, phi0: f64, s0: f64) -> f64 {
        self.0.value_of(phi0, s0)
    }

    /// Optimal rate `−(S/Λ)(1 − g'(Φ/S))`.
    fn optimal_rate(&self, s: f64, phi: f64) -> f64 {
        if phi <= 0.0 {
            return 0.0;
        }
        -(s / self.0.lambda()) * (1.0 - self.0.g_prime(phi / s))
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.0.value_function().x_grid().to_vec()
    }
    #[getter]
    fn g_values(&self) -> Vec<f64> {
        self.0.value_function().g().to_vec()
    }
    #[getter]
    fn g_prime_values(&self) -> Vec<f64> {
        self.0.value_function().g_prime().to_vec()
    }
    #[getter]
    fn residual_sup(&self) -> f64 {
        self.0.value_function().residual_sup()
    }
    #[getter]
    fn params(&self) -> PyMarketParams {
        PyMarketParams(*self.0.value_function().params())
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &json_of(&self.0.value_function().validate())?)
    }
}

#[pyclass(name = "Policy", frozen)]
struct PyPolicy(strategy::Policy);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn optimal(vf: &PyValueFunction) -> Self {
        Self(strategy::Policy::OptimalFeedback(vf.0.clone()))
    }
    /// Same feedback without the `1/Λ` factor.
    #[staticmethod]
    fn unscaled(vf: &PyValueFunction) -> Self {
        Self(strategy::Policy::UnscaledFeedback(vf.0.clone()))
    }
    #[staticmethod]
    fn exponential(c: f64) -> Self {
        Self(strategy::Policy::ExponentialRate { c })
    }
    #[staticmethod]
    fn slow_exponential(n: f64) -> Self {
        Self(strategy::Policy::slow_exponential(n))
    }
    #[staticmethod]
    fn constant(horizon: f64) -> Self {
        Self(strategy::Policy::ConstantRate { horizon })
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name()
    }

    fn __repr__(&self) -> String {
        format!("Policy({})", self.0.name())
    }
}

/// `h(y)` for the critical case with the given `σ`, `Λ`.
#[pyfunction]
fn h_ratio(y: f64, sigma: f64, lambda_impact: f64) -> PyResult<f64> {
    let p = CriticalParams::new(sigma, lambda_impact).map_err(err)?;
    closed_form::h_ratio(y, &p).map_err(err)
}

#[pyfunction]
fn g_critical(x: f64, sigma: f64, lambda_impact: f64) -> PyResult<f64> {
    let p = CriticalParams::new(sigma, lambda_impact).map_err(err)?;
    Ok(closed_form::g_critical(x, &p))
}

/// `(times, prices)` on a uniform grid.
#[pyfunction]
#[pyo3(signature = (params, horizon, steps, seed, stream = 0))]
fn simulate_gbm(
    params: PyMarketParams,
    horizon: f64,
    steps: usize,
    seed: u64,
    stream: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if steps == 0 {
        return Err(PyValueError::new_err("steps must be positive"));
    }
    let path =
        market::simulate_gbm(&params.0, &uniform_grid(horizon, steps), StreamId::new(seed, stream)).map_err(err)?;
    Ok((path.times, path.prices))
}

/// Runs a policy along given prices; returns a dict of arrays and totals.
#[pyfunction]
#[pyo3(signature = (policy, params, times, prices, substeps = 8))]
fn simulate_execution<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    params: PyMarketParams,
    times: Vec<f64>,
    prices: Vec<f64>,
    substeps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if times.len() != prices.len() {
        return Err(PyValueError::new_err("times and prices differ in length"));
    }
    let path = PricePath { times, prices };
    let r = strategy::simulate_execution(&policy.0, &path, &params.0, substeps).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("policy", &r.policy)?;
    d.set_item("rate", &r.rate)?;
    d.set_item("inventory", &r.inventory)?;
    d.set_item("revenue_cum", &r.revenue_cum)?;
    d.set_item("impact_cost_cum", &r.impact_cost_cum)?;
    d.set_item("v_realized", r.v_realized)?;
    d.set_item("hit_time", r.hit_time)?;
    if let Some(fb) = policy.0.feedback() {
        let m = strategy::supermartingale_diagnostic(&r, fb).map_err(err)?;
        d.set_item("M", m.m)?;
    }
    Ok(d)
}

fn mc_config(
    n_paths: usize,
    steps: usize,
    horizon: Option<f64>,
    seed: u64,
    antithetic: bool,
    graded: bool,
) -> McConfig {
    McConfig {
        n_paths,
        steps,
        horizon,
        seed,
        antithetic,
        grid: if graded { GridKind::Graded } else { GridKind::Uniform },
        ..Default::default()
    }
}

/// Monte Carlo estimate of `E[V]`; the dict mirrors the JSON record.
#[pyfunction]
#[pyo3(signature = (params, policy, n_paths = 100_000, steps = 512, horizon = None, seed = 20240611, antithetic = true, graded = true))]
#[allow(clippy::too_many_arguments)]
fn estimate_value<'py>(
    py: Python<'py>,
    params: PyMarketParams,
    policy: &PyPolicy,
    n_paths: usize,
    steps: usize,
    horizon: Option<f64>,
    seed: u64,
    antithetic: bool,
    graded: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = mc_config(n_paths, steps, horizon, seed, antithetic, graded);
    let pol = policy.0.clone();
    let est = py.detach(move || monte_carlo::estimate_value(&params.0, &pol, &cfg)).map_err(err)?;
    to_py(py, &json_of(&est)?)
}

/// Policies on common paths; differences are against the first.
#[pyfunction]
#[pyo3(signature = (params, policies, n_paths = 100_000, steps = 512, horizon = None, seed = 20240611, antithetic = true, graded = true))]
#[allow(clippy::too_many_arguments)]
fn compare_policies<'py>(
    py: Python<'py>,
    params: PyMarketParams,
    policies: Vec<PyRef<'py, PyPolicy>>,
    n_paths: usize,
    steps: usize,
    horizon: Option<f64>,
    seed: u64,
    antithetic: bool,
    graded: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = mc_config(n_paths, steps, horizon, seed, antithetic, graded);
    let pols: Vec<strategy::Policy> = policies.iter().map(|p| p.0.clone()).collect();
    let table = py.detach(move || monte_carlo::compare_policies(&params.0, &pols, &cfg)).map_err(err)?;
    to_py(py, &json_of(&table)?)
}

#[pyclass(name = "HjbGrid", frozen)]
struct PyHjbGrid(Arc<dp_oracle::HjbGrid>);

#[pymethods]
impl PyHjbGrid {
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.0.x.clone()
    }
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }
    /// `u(0, ·)` on the nodes.
    #[getter]
    fn u0(&self) -> Vec<f64> {
        self.0.initial().to_vec()
    }
    #[getter]
    fn nt(&self) -> usize {
        self.0.meta.nt
    }
    fn value(&self, t: f64, x: f64) -> PyResult<f64> {
        self.0.value(t, x).map_err(err)
    }
    fn policy(&self, t: f64, x: f64) -> PyResult<f64> {
        self.0.policy(t, x).map_err(err)
    }
    fn tail_certificate(&self) -> f64 {
        self.0.tail_certificate()
    }
    /// `max |u(0, x) − g(x)|` over nodes in `[lo, hi]`.
    fn deviation(&self, vf: &PyValueFunction, lo: f64, hi: f64) -> f64 {
        self.0.deviation(|x| vf.0.g(x), lo, hi).max_abs
    }
    fn to_csv(&self) -> String {
        self.0.to_csv()
    }
}

#[pyfunction]
#[pyo3(signature = (params, horizon = 40.0, x_max = 25.0, nx = 400, nt = None))]
fn march_hjb(
    py: Python<'_>,
    params: PyMarketParams,
    horizon: f64,
    x_max: f64,
    nx: usize,
    nt: Option<usize>,
) -> PyResult<PyHjbGrid> {
    let cfg = dp_oracle::HjbConfig { horizon, x_max, nx, nt, ..Default::default() };
    py.detach(move || dp_oracle::march_hjb(&params.0, &cfg)).map(|g| PyHjbGrid(Arc::new(g))).map_err(err)
}

#[pymodule]
fn pyoptexec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMarketParams>()?;
    m.add_class::<PyValueFunction>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyHjbGrid>()?;
    m.add_function(wrap_pyfunction!(h_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(g_critical, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_gbm, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_execution, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_value, m)?)?;
    m.add_function(wrap_pyfunction!(compare_policies, m)?)?;
    m.add_function(wrap_pyfunction!(march_hjb, m)?)?;
    Ok(())
}
