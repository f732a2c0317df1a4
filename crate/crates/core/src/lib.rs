//! Constrained infinite-horizon optimal execution under geometric Brownian
//! motion with linear temporary price impact.
//!
//! The value of liquidating `Φ₀` shares at initial price `S₀` is
//! `S₀² g(Φ₀/S₀)`, where `g` solves a singular nonlinear second-order ODE on
//! `x = Φ/S`. This crate solves for `g` ([`value_ode`]), evaluates the exact
//! solution of the critical case `2μ + σ² = 0` ([`closed_form`]), runs the
//! optimal feedback policy and competitors along simulated price paths
//! ([`strategy`], [`monte_carlo`]) and cross-checks everything against an
//! explicit finite-horizon HJB time-marcher ([`dp_oracle`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod closed_form;
pub mod dp_oracle;
pub mod error;
pub mod market;
pub mod monte_carlo;
pub mod quad;
pub mod regression;
pub mod rk;
pub mod rng;
pub mod strategy;
pub mod value_ode;

mod fmt;

pub use closed_form::{g_critical, h_ratio, optimal_rate_critical, CriticalParams};
pub use dp_oracle::{march_hjb, policy_from_grid, HjbConfig, HjbGrid};
pub use error::{Error, Result};
pub use market::{regime, simulate_gbm, MarketParams, PricePath, Regime, RegimeInfo};
pub use monte_carlo::{compare_policies, estimate_value, ComparisonTable, GridKind, McConfig, McEstimate};
pub use strategy::{simulate_execution, supermartingale_diagnostic, ExecutionResult, Feedback, Policy};
pub use value_ode::{integrate_value_ode, series_init, SolverOptions, ValidationReport, ValueFunction};
