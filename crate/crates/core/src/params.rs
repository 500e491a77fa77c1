//! Model coefficients and the scalar diagnostics that can be checked without
//! solving anything: the Feller and positive-variance conditions, the drift
//! shift induced by the driver's vega, and the parabolicity bounds of the
//! diffusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Market and model coefficients.
///
/// `omega` multiplies only the `-v` part of the variance drift in the pricing
/// PDE; the SDEs use `omega = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Real-world stock drift, used only by the simulator.
    pub mu: f64,
    pub r: f64,
    pub kappa: f64,
    pub vbar: f64,
    pub eta: f64,
    pub rho: f64,
    pub omega: f64,
    /// Impact coefficient of the driver's vega on the variance drift.
    pub q: f64,
}

impl Default for ModelParams {
    /// The reference parameter set used in the numerical experiments.
    fn default() -> Self {
        Self {
            mu: 0.05,
            r: 0.03,
            kappa: 0.55,
            vbar: 0.04,
            eta: 0.3,
            rho: -0.7571,
            omega: 1.0,
            q: 0.0003,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu", self.mu),
            ("r", self.r),
            ("kappa", self.kappa),
            ("vbar", self.vbar),
            ("eta", self.eta),
            ("rho", self.rho),
            ("omega", self.omega),
            ("q", self.q),
        ];
        for (key, value) in fields {
            if !value.is_finite() {
                return Err(invalid(key, "must be finite"));
            }
        }
        if self.kappa <= 0.0 {
            return Err(invalid("kappa", "must be > 0"));
        }
        if self.vbar <= 0.0 {
            return Err(invalid("vbar", "must be > 0"));
        }
        // eta = 0 is admitted for the zero-vol-of-vol degeneracy checks of the
        // simulator; the PDE solvers reject it through `parabolicity_bounds`.
        if self.eta < 0.0 {
            return Err(invalid("eta", "must be >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(invalid("rho", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

fn invalid(key: &str, reason: &str) -> Error {
    Error::Validation {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

/// Outcome of a strict inequality check `lhs > rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub margin: f64,
}

impl ConditionReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs > rhs,
            margin: lhs - rhs,
        }
    }
}

/// Feller's condition `2 kappa vbar > eta^2`.
pub fn check_feller(params: &ModelParams) -> ConditionReport {
    ConditionReport::new(2.0 * params.kappa * params.vbar, params.eta * params.eta)
}

/// Positive variance condition `2 kappa (vbar + min(Q F_v)) > eta^2`.
///
/// `min_q_vega` is the minimum of `Q * dF/dv` over the domain, which the caller
/// obtains from a solved driver surface.
pub fn check_positive_variance(params: &ModelParams, min_q_vega: f64) -> ConditionReport {
    ConditionReport::new(2.0 * params.kappa * (params.vbar + min_q_vega), params.eta * params.eta)
}

/// Additive shift `kappa * Q * vega` of the variance drift.
pub fn drift_shift(params: &ModelParams, vega: f64) -> f64 {
    params.kappa * params.q * vega
}

/// Extreme eigenvalues `(nu1, nu2)` of the diffusion matrix
/// `a = [[x^2 y / 2, eta rho x y / 2], [eta rho x y / 2, eta^2 y / 2]]`
/// over all grid nodes.
pub fn parabolicity_bounds(params: &ModelParams, grid: &GridSpec) -> Result<(f64, f64)> {
    let mut nu1 = f64::INFINITY;
    let mut nu2 = f64::NEG_INFINITY;
    for i in 0..=grid.n_s {
        let x = grid.s(i);
        for j in 0..=grid.n_v {
            let y = grid.v(j);
            let (lo, hi) = diffusion_eigenvalues(params, x, y);
            nu1 = nu1.min(lo);
            nu2 = nu2.max(hi);
        }
    }
    if nu1 <= 0.0 {
        return Err(Error::DegenerateDiffusion { nu1 });
    }
    Ok((nu1, nu2))
}

fn diffusion_eigenvalues(params: &ModelParams, x: f64, y: f64) -> (f64, f64) {
    let a11 = 0.5 * x * x * y;
    let a22 = 0.5 * params.eta * params.eta * y;
    let a12 = 0.5 * params.eta * params.rho * x * y;
    let half_trace = 0.5 * (a11 + a22);
    let radius = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
    let hi = half_trace + radius;
    // det written in factored form so that |rho| = 1 gives an exact zero
    let det = 0.25 * x * x * params.eta * params.eta * y * y * (1.0 - params.rho * params.rho);
    let lo = if hi > 0.0 { det / hi } else { 0.0 };
    (lo, hi)
}
