//! Pricing engine for the Heston stochastic-volatility model extended with a
//! market driver: a distinguished derivative position whose vega shifts the
//! drift of the variance process.
//!
//! The crate is organised bottom-up:
//!
//! - [`params`]: model coefficients and closed-form condition checks.
//! - [`grid`]: the `(S, v)` lattice, payoffs, boundary conditions and the
//!   explicit-scheme stability bound.
//! - [`engine`]: the explicit time-stepping engine shared by every linear PDE.
//! - [`driver`]: the semilinear driver PDE, solved directly and by policy
//!   improvement.
//! - [`risk`]: grid Greeks, implied Heston volatility and model comparison.
//! - [`sim`]: Euler–Maruyama simulation of the coupled SDE pairs.
//! - [`config`] and [`cli`]: run configuration and command dispatch.

pub mod cli;
pub mod config;
pub mod driver;
pub mod engine;
pub mod error;
pub mod grid;
pub mod params;
pub mod risk;
pub mod sim;

pub use driver::{PiaTrace, PolicyField};
pub use engine::Surface;
pub use error::{Error, Result};
pub use grid::{Field, GridSpec, PayoffKind, PayoffSpec};
pub use params::{ConditionReport, ModelParams};

pub use risk::{GreekStencil, GreeksReport};
pub use sim::{PathPair, PositivityReport, SimConfig};
