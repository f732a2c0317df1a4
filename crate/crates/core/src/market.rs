//! Model parameters, regime classification and exact GBM sampling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::rng::StreamId;

/// Constants of the price model `dS = μS dt + σS dW` and of the execution
/// problem: temporary impact `Λ`, initial price `S₀`, initial inventory `Φ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub mu: f64,
    pub sigma: f64,
    pub lambda_impact: f64,
    pub s0: f64,
    pub phi0: f64,
}

impl MarketParams {
    pub fn new(mu: f64, sigma: f64, lambda_impact: f64, s0: f64, phi0: f64) -> Result<Self> {
        let p = Self { mu, sigma, lambda_impact, s0, phi0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        if !self.mu.is_finite() {
            return bad("mu must be finite");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.lambda_impact > 0.0 && self.lambda_impact.is_finite()) {
            return bad("lambda_impact must be positive");
        }
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return bad("s0 must be positive");
        }
        if !(self.phi0 >= 0.0 && self.phi0.is_finite()) {
            return bad("phi0 must be non-negative");
        }
        Ok(())
    }

    /// `2μ + σ²`; zero in the critical case where `S²` is a martingale.
    pub fn critical_gap(&self) -> f64 {
        2.0 * self.mu + self.sigma * self.sigma
    }

    /// Reduced state `Φ₀/S₀`.
    pub fn x0(&self) -> f64 {
        self.phi0 / self.s0
    }

    /// Same market, different position.
    pub fn with_position(&self, s0: f64, phi0: f64) -> Result<Self> {
        Self::new(self.mu, self.sigma, self.lambda_impact, s0, phi0)
    }

    /// True when `other` describes the same dynamics (μ, σ, Λ), ignoring the
    /// position. Value functions depend only on these three. Agreement is to
    /// 1e-12 relative, so a drift rebuilt as `−σ²/2` still matches.
    pub fn same_dynamics(&self, other: &MarketParams) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        close(self.mu, other.mu) && close(self.sigma, other.sigma) && close(self.lambda_impact, other.lambda_impact)
    }

    pub fn regime(&self) -> RegimeInfo {
        regime(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    NegativeDrift,
    Martingale,
    PositiveDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeInfo {
    pub regime: Regime,
    pub critical: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeTolerances {
    pub zero: f64,
    pub critical: f64,
}

impl Default for RegimeTolerances {
    fn default() -> Self {
        Self { zero: 1e-12, critical: 1e-12 }
    }
}

pub fn regime(params: &MarketParams) -> RegimeInfo {
    regime_with(params, RegimeTolerances::default())
}

pub fn regime_with(params: &MarketParams, tol: RegimeTolerances) -> RegimeInfo {
    let regime = if params.mu < -tol.zero {
        Regime::NegativeDrift
    } else if params.mu.abs() <= tol.zero {
        Regime::Martingale
    } else {
        Regime::PositiveDrift
    };
    RegimeInfo { regime, critical: params.critical_gap().abs() <= tol.critical }
}

/// `k·T/steps` for `k = 0..=steps`.
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect()
}

/// Grid with equal increments of `1 − e^{−λt}` on `[0, T]`: steps are short
/// early and long late. Falls back to uniform for `λ ≤ 0`.
pub fn graded_grid(horizon: f64, steps: usize, decay: f64) -> Vec<f64> {
    if !(decay > 0.0) {
        return uniform_grid(horizon, steps);
    }
    let mass = -(-decay * horizon).exp_m1();
    let mut g: Vec<f64> = (0..=steps).map(|k| -(-mass * k as f64 / steps as f64).ln_1p() / decay).collect();
    g[steps] = horizon;
    g
}

pub(crate) fn check_time_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidInput("time grid needs at least two points".into()));
    }
    if grid[0] != 0.0 {
        return Err(Error::InvalidInput("time grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// A sampled price trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePath {
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
}

impl PricePath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal(&self) -> f64 {
        *self.prices.last().expect("non-empty path")
    }

    /// A path with a fixed price; the σ → 0 harness for execution tests.
    pub fn constant(times: Vec<f64>, price: f64) -> Result<Self> {
        check_time_grid(&times)?;
        let prices = vec![price; times.len()];
        Ok(Self { times, prices })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,S\n");
        for (t, s) in self.times.iter().zip(&self.prices) {
            let _ = writeln!(out, "{},{}", fmt::num(*t), fmt::num(*s));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,S" => {}
            _ => return Err(Error::InvalidInput("expected header `t,S`".into())),
        }
        let (mut times, mut prices) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut it = line.split(',');
            let parse = |f: Option<&str>| {
                f.and_then(fmt::parse).ok_or_else(|| Error::InvalidInput(format!("bad row `{line}`")))
            };
            times.push(parse(it.next())?);
            prices.push(parse(it.next())?);
        }
        check_time_grid(&times)?;
        if prices.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("prices must be positive".into()));
        }
        Ok(Self { times, prices })
    }
}

/// Exact lognormal stepping from given standard normals:
/// `S_{k+1} = S_k exp(σ√Δ z_k + (μ − σ²/2)Δ)`. `sign = -1.0` gives the
/// antithetic partner.
pub fn gbm_path_from_normals(
    params: &MarketParams,
    time_grid: &[f64],
    normals: &[f64],
    sign: f64,
) -> Result<PricePath> {
    check_time_grid(time_grid)?;
    if normals.len() + 1 < time_grid.len() {
        return Err(Error::InvalidInput("not enough normals for the time grid".into()));
    }
    let mut prices = Vec::with_capacity(time_grid.len());
    prices.push(params.s0);
    fill_prices(params, time_grid, normals, sign, &mut prices);
    Ok(PricePath { times: time_grid.to_vec(), prices })
}

/// Appends prices for `time_grid[1..]` to `prices`, which must already hold
/// the initial price.
pub(crate) fn fill_prices(params: &MarketParams, time_grid: &[f64], normals: &[f64], sign: f64, prices: &mut Vec<f64>) {
    let drift = params.mu - 0.5 * params.sigma * params.sigma;
    let mut s = *prices.last().expect("initial price");
    for (w, z) in time_grid.windows(2).zip(normals) {
        let dt = w[1] - w[0];
        s *= (params.sigma * dt.sqrt() * sign * z + drift * dt).exp();
        prices.push(s);
    }
}

/// Samples a GBM path on `time_grid` from the stream `stream`.
pub fn simulate_gbm(params: &MarketParams, time_grid: &[f64], stream: StreamId) -> Result<PricePath> {
    params.validate()?;
    check_time_grid(time_grid)?;
    let mut z = vec![0.0; time_grid.len() - 1];
    stream.fill_normals(&mut z);
    gbm_path_from_normals(params, time_grid, &z, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mu: f64, sigma: f64) -> MarketParams {
        MarketParams::new(mu, sigma, 1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn regime_examples() {
        assert_eq!(regime(&params(-0.125, 0.5)), RegimeInfo { regime: Regime::NegativeDrift, critical: true });
        assert_eq!(regime(&params(0.0, 0.2)), RegimeInfo { regime: Regime::Martingale, critical: false });
        assert_eq!(regime(&params(-0.3, 0.2)), RegimeInfo { regime: Regime::NegativeDrift, critical: false });
        assert_eq!(regime(&params(0.1, 0.2)).regime, Regime::PositiveDrift);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(MarketParams::new(-0.1, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(MarketParams::new(-0.1, 0.2, -1.0, 1.0, 1.0).is_err());
        assert!(MarketParams::new(-0.1, 0.2, 1.0, 0.0, 1.0).is_err());
        assert!(MarketParams::new(-0.1, 0.2, 1.0, 1.0, -1.0).is_err());
        assert!(MarketParams::new(f64::NAN, 0.2, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rejects_non_increasing_grid() {
        let p = params(-0.1, 0.2);
        let err = simulate_gbm(&p, &[0.0, 1.0, 1.0, 2.0], StreamId::new(0, 0));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(simulate_gbm(&p, &[0.5, 1.0], StreamId::new(0, 0)).is_err());
    }

    #[test]
    fn vanishing_volatility_is_deterministic_growth() {
        let p = MarketParams::new(-0.2, 1e-12, 1.0, 3.0, 1.0).unwrap();
        let grid = uniform_grid(5.0, 100);
        let path = simulate_gbm(&p, &grid, StreamId::new(11, 0)).unwrap();
        for (t, s) in path.times.iter().zip(&path.prices) {
            let expect = 3.0 * (-0.2 * t).exp();
            assert!(((s - expect) / expect).abs() < 1e-9);
        }
    }

    #[test]
    fn antithetic_geometric_mean_is_deterministic() {
        let p = params(-0.07, 0.4);
        let grid = uniform_grid(3.0, 64);
        let mut z = vec![0.0; 64];
        StreamId::new(5, 9).fill_normals(&mut z);
        let up = gbm_path_from_normals(&p, &grid, &z, 1.0).unwrap();
        let down = gbm_path_from_normals(&p, &grid, &z, -1.0).unwrap();
        let gm = (up.terminal() * down.terminal()).sqrt();
        let expect = (p.mu - 0.5 * p.sigma * p.sigma) * 3.0;
        assert!((gm / expect.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_mean_matches_lognormal() {
        let p = params(-0.1, 0.3);
        let grid = uniform_grid(2.0, 4);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut logsum = 0.0;
        let mut logsq = 0.0;
        for i in 0..n {
            let s = simulate_gbm(&p, &grid, StreamId::new(3, i)).unwrap().terminal();
            sum += s;
            sumsq += s * s;
            logsum += s.ln();
            logsq += s.ln() * s.ln();
        }
        let nf = n as f64;
        let mean = sum / nf;
        let se = ((sumsq / nf - mean * mean) / nf).sqrt();
        assert!((mean - (p.mu * 2.0).exp()).abs() < 3.0 * se);
        let lmean = logsum / nf;
        let lvar = logsq / nf - lmean * lmean;
        assert!((lvar / 2.0 - p.sigma * p.sigma).abs() < 0.002);
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let p = params(-0.1, 0.3);
        let grid = uniform_grid(1.0, 10);
        let a = simulate_gbm(&p, &grid, StreamId::new(42, 1)).unwrap();
        let b = simulate_gbm(&p, &grid, StreamId::new(42, 1)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(PricePath::from_csv(&a.to_csv()).unwrap(), a);
        assert!(a.to_csv().starts_with("t,S\n"));
    }
}
