use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{key}`: {reason}")]
    Validation { key: String, reason: String },

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("diffusion matrix is degenerate (min eigenvalue {nu1:e}); the PDE is not uniformly parabolic")]
    DegenerateDiffusion { nu1: f64 },

    #[error("explicit scheme unstable: dt = {dt:e} exceeds the stability bound {bound:e}")]
    Unstable { dt: f64, bound: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("numerical blow-up at step {step}: |u| = {magnitude:e} at node ({i}, {j})")]
    NumericalBlowup {
        step: usize,
        i: usize,
        j: usize,
        magnitude: f64,
    },

    #[error("point (s = {s}, v = {v}) is outside the grid")]
    OutOfDomain { s: f64, v: f64 },

    #[error("point (s = {s}, v = {v}) is not a grid node")]
    OffNode { s: f64, v: f64 },

    #[error("policy iteration did not converge in {iterations} iterations (last difference {last_diff:e})")]
    NoConvergence { iterations: usize, last_diff: f64 },

    #[error("target price {target} outside attainable range [{low}, {high}]")]
    BracketFailure { target: f64, low: f64, high: f64 },

    #[error("price is not monotone in variance at v index {index}")]
    NonMonotone { index: usize },

    #[error("surfaces do not share grid and parameters")]
    Incompatible,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
