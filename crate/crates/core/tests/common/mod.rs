//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod heston_cf;

use market_driver::engine::{Surface, TimeFields};
use market_driver::{Field, GridSpec, ModelParams};

pub use heston_cf::HestonCf;

pub fn oracle(p: &ModelParams) -> HestonCf {
    HestonCf {
        r: p.r,
        kappa: p.kappa,
        theta: p.vbar,
        eta: p.eta,
        rho: p.rho,
    }
}

/// Coarse grid that keeps the explicit scheme stable for the default model.
pub fn coarse_grid() -> GridSpec {
    GridSpec {
        n_s: 40,
        n_v: 20,
        n_t: 4000,
        ..GridSpec::default()
    }
}

/// A driver surface whose vega is `value` everywhere and at all times.
pub fn flat_vega_surface(grid: &GridSpec, params: &ModelParams, value: f64) -> Surface {
    let mut vega = TimeFields::new();
    vega.push(0.0, Field::filled(grid, value));
    vega.push(grid.t_max, Field::filled(grid, value));
    Surface {
        values: Field::zeros(grid),
        vega,
        grid: *grid,
        params: *params,
    }
}
