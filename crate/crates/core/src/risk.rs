//! Grid Greeks, implied Heston volatility and side-by-side model comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{self, Surface, DEFAULT_VEGA_STRIDE};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, PayoffSpec};
use crate::params::ModelParams;

/// Relative distance (in grid spacings) within which a query snaps to a node.
pub const NODE_SNAP_TOL: f64 = 1e-9;

/// Price sensitivities at one node. Vega, vanna and volga are taken with
/// respect to the variance `v`, not the volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GreeksReport {
    pub value: f64,
    pub delta: f64,
    pub vega: f64,
    pub vanna: f64,
    pub volga: f64,
}

/// Finite-difference convention for [`greeks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GreekStencil {
    /// Desk convention: forward differences for delta and vega, then central
    /// differences of the forward vega for vanna and volga.
    #[default]
    Forward,
    /// Second-order central differences throughout.
    Central,
}

/// Greeks of `surface` at the node `(s, v)`.
///
/// The query must lie on a node (within [`NODE_SNAP_TOL`] spacings);
/// second differences off-node are not reported. Near edges the stencils fall
/// back to one-sided differences.
pub fn greeks(surface: &Surface, s: f64, v: f64, stencil: GreekStencil) -> Result<GreeksReport> {
    let grid = &surface.grid;
    if !grid.contains(s, v) {
        return Err(Error::OutOfDomain { s, v });
    }
    let (i, j) = grid.node_at(s, v, NODE_SNAP_TOL).ok_or(Error::OffNode { s, v })?;
    Ok(greeks_at_node(&surface.values, grid, i, j, stencil))
}

pub fn greeks_at_node(u: &Field, grid: &GridSpec, i: usize, j: usize, stencil: GreekStencil) -> GreeksReport {
    let (ns, nv) = (grid.n_s, grid.n_v);
    let (ds, dv) = (grid.ds(), grid.dv());
    match stencil {
        GreekStencil::Forward => {
            // forward vega at (a, b), backward on the top edge
            let fwd_vega = |a: usize, b: usize| {
                if b < nv {
                    (u[(a, b + 1)] - u[(a, b)]) / dv
                } else {
                    (u[(a, b)] - u[(a, b - 1)]) / dv
                }
            };
            let delta = if i < ns {
                (u[(i + 1, j)] - u[(i, j)]) / ds
            } else {
                (u[(i, j)] - u[(i - 1, j)]) / ds
            };
            let (lo, hi) = span(i, ns);
            let vanna = (fwd_vega(hi, j) - fwd_vega(lo, j)) / ((hi - lo) as f64 * ds);
            let (lo, hi) = span(j, nv);
            let volga = (fwd_vega(i, hi) - fwd_vega(i, lo)) / ((hi - lo) as f64 * dv);
            GreeksReport {
                value: u[(i, j)],
                delta,
                vega: fwd_vega(i, j),
                vanna,
                volga,
            }
        }
        GreekStencil::Central => {
            let (s_lo, s_hi) = span(i, ns);
            let (v_lo, v_hi) = span(j, nv);
            let hs = (s_hi - s_lo) as f64 * ds;
            let hv = (v_hi - v_lo) as f64 * dv;
            let delta = (u[(s_hi, j)] - u[(s_lo, j)]) / hs;
            let vega = (u[(i, v_hi)] - u[(i, v_lo)]) / hv;
            let vanna = (u[(s_hi, v_hi)] - u[(s_hi, v_lo)] - u[(s_lo, v_hi)] + u[(s_lo, v_lo)]) / (hs * hv);
            // second difference centred on the nearest interior index
            let c = j.clamp(1, nv - 1);
            let volga = (u[(i, c + 1)] - 2.0 * u[(i, c)] + u[(i, c - 1)]) / (dv * dv);
            GreeksReport {
                value: u[(i, j)],
                delta,
                vega,
                vanna,
                volga,
            }
        }
    }
}

/// Neighbour indices for a central difference, one-sided on the edges.
fn span(k: usize, n: usize) -> (usize, usize) {
    if k == 0 {
        (0, 1)
    } else if k == n {
        (n - 1, n)
    } else {
        (k - 1, k + 1)
    }
}

/// Heston-equivalent volatility: solves the plain Heston PDE for `payoff` and
/// inverts the price along the variance axis at stock level `s`.
pub fn implied_heston_vol(
    grid: &GridSpec,
    params: &ModelParams,
    payoff: &PayoffSpec,
    target_price: f64,
    s: f64,
) -> Result<f64> {
    let heston = engine::solve(grid, params, payoff, None, None, DEFAULT_VEGA_STRIDE)?;
    implied_vol_from_surface(&heston, target_price, s)
}

/// Price tolerance of the variance bisection.
pub const IMPLIED_PRICE_TOL: f64 = 1e-10;

/// `sqrt(v*)` where the Heston price at `(s, v*)` equals `target_price`.
///
/// The price slice at the node nearest `s` is linearly interpolated in `v`
/// and must be nondecreasing; `v*` is found by bisection.
pub fn implied_vol_from_surface(heston: &Surface, target_price: f64, s: f64) -> Result<f64> {
    let grid = &heston.grid;
    if !(grid.s_min..=grid.s_max).contains(&s) {
        return Err(Error::OutOfDomain { s, v: grid.v_min });
    }
    let i = grid
        .node_at(s, grid.v_min, NODE_SNAP_TOL)
        .ok_or(Error::OffNode { s, v: grid.v_min })?
        .0;
    let column: Vec<f64> = (0..=grid.n_v).map(|j| heston.values[(i, j)]).collect();
    for (j, w) in column.windows(2).enumerate() {
        if w[1] < w[0] - 1e-12 {
            return Err(Error::NonMonotone { index: j + 1 });
        }
    }
    let price = |v: f64| {
        let x = (v - grid.v_min) / grid.dv();
        let j = (x.floor() as usize).min(grid.n_v - 1);
        let w = x - j as f64;
        (1.0 - w) * column[j] + w * column[j + 1]
    };
    let (low, high) = (column[0], column[grid.n_v]);
    if !(low..=high).contains(&target_price) {
        return Err(Error::BracketFailure {
            target: target_price,
            low,
            high,
        });
    }
    let (mut a, mut b) = (grid.v_min, grid.v_max);
    let mut mid = 0.5 * (a + b);
    for _ in 0..200 {
        mid = 0.5 * (a + b);
        let p = price(mid);
        if (p - target_price).abs() <= IMPLIED_PRICE_TOL {
            break;
        }
        if p < target_price {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(mid.sqrt())
}

/// One row of a model comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub s: f64,
    pub v: f64,
    pub heston: GreeksReport,
    pub driver: GreeksReport,
    pub heston_vol: f64,
    pub driver_vol: f64,
}

impl ComparisonRow {
    pub fn vol_increment(&self) -> f64 {
        self.driver_vol - self.heston_vol
    }
}

/// Compares a Heston surface with a driver-adjusted surface of the same
/// product: values, Greeks and implied Heston volatilities at each point.
pub fn compare_models(
    heston: &Surface,
    driver_adjusted: &Surface,
    points: &[(f64, f64)],
    stencil: GreekStencil,
) -> Result<Vec<ComparisonRow>> {
    if heston.grid != driver_adjusted.grid || heston.params != driver_adjusted.params {
        return Err(Error::Incompatible);
    }
    points
        .iter()
        .map(|&(s, v)| {
            let h = greeks(heston, s, v, stencil)?;
            let d = greeks(driver_adjusted, s, v, stencil)?;
            Ok(ComparisonRow {
                s,
                v,
                heston: h,
                driver: d,
                heston_vol: implied_vol_from_surface(heston, h.value, s)?,
                driver_vol: implied_vol_from_surface(heston, d.value, s)?,
            })
        })
        .collect()
}

/// Writes `point_s,point_v,model,value,delta_pct,vega,vanna,volga,implied_vol_pct`.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "point_s",
        "point_v",
        "model",
        "value",
        "delta_pct",
        "vega",
        "vanna",
        "volga",
        "implied_vol_pct",
    ])?;
    for row in rows {
        for (model, g, vol) in [
            ("heston", &row.heston, row.heston_vol),
            ("driver", &row.driver, row.driver_vol),
        ] {
            w.write_record([
                row.s.to_string(),
                row.v.to_string(),
                model.to_string(),
                g.value.to_string(),
                (100.0 * g.delta).to_string(),
                g.vega.to_string(),
                g.vanna.to_string(),
                g.volga.to_string(),
                (100.0 * vol).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TimeFields;

    fn grid() -> GridSpec {
        GridSpec {
            n_s: 20,
            n_v: 20,
            n_t: 4000,
            ..GridSpec::default()
        }
    }

    fn surface_of(f: impl Fn(f64, f64) -> f64) -> Surface {
        let g = grid();
        Surface {
            values: Field::from_fn(&g, f),
            vega: TimeFields::new(),
            grid: g,
            params: ModelParams::default(),
        }
    }

    #[test]
    fn affine_field_is_exact() {
        let surf = surface_of(|s, v| 2.0 + 0.6 * s - 4.0 * v);
        let g = surf.grid;
        for stencil in [GreekStencil::Forward, GreekStencil::Central] {
            for (i, j) in [(5, 5), (0, 0), (g.n_s, g.n_v), (3, g.n_v)] {
                let r = greeks(&surf, g.s(i), g.v(j), stencil).unwrap();
                assert!((r.delta - 0.6).abs() < 1e-9, "{stencil:?} {r:?}");
                assert!((r.vega + 4.0).abs() < 1e-9);
                assert!(r.vanna.abs() < 1e-6 && r.volga.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_in_v_has_unit_curvature() {
        let surf = surface_of(|_, v| v * v);
        let g = surf.grid;
        for stencil in [GreekStencil::Forward, GreekStencil::Central] {
            let r = greeks(&surf, g.s(7), g.v(9), stencil).unwrap();
            assert!((r.volga - 2.0).abs() < 1e-8, "{stencil:?} {r:?}");
            assert_eq!(r.delta, 0.0);
            assert_eq!(r.vanna, 0.0);
        }
    }

    #[test]
    fn off_node_and_outside_rejected() {
        let surf = surface_of(|s, _| s);
        let g = surf.grid;
        assert!(matches!(
            greeks(&surf, g.s(3) + 0.3 * g.ds(), g.v(2), GreekStencil::Forward),
            Err(Error::OffNode { .. })
        ));
        assert!(matches!(
            greeks(&surf, 500.0, 0.1, GreekStencil::Forward),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn implied_vol_inverts_node_prices() {
        // strictly increasing in v
        let surf = surface_of(|s, v| 0.1 * s + 30.0 * v.sqrt());
        let g = surf.grid;
        for j in [1, 4, 11, 19] {
            let target = surf.values[(6, j)];
            let sigma = implied_vol_from_surface(&surf, target, g.s(6)).unwrap();
            assert!((sigma - g.v(j).sqrt()).abs() < 1e-6);
        }
        assert!(matches!(
            implied_vol_from_surface(&surf, 0.0, g.s(6)),
            Err(Error::BracketFailure { .. })
        ));
    }

    #[test]
    fn non_monotone_slice_detected() {
        let surf = surface_of(|_, v| (v - 0.5).powi(2));
        assert!(matches!(
            implied_vol_from_surface(&surf, 0.1, surf.grid.s(4)),
            Err(Error::NonMonotone { .. })
        ));
    }

    #[test]
    fn self_comparison_has_zero_increment() {
        let surf = surface_of(|s, v| 0.2 * s + 10.0 * v);
        let g = surf.grid;
        let rows = compare_models(&surf, &surf, &[(g.s(5), g.v(3))], GreekStencil::Forward).unwrap();
        assert_eq!(rows[0].vol_increment(), 0.0);
        let mut buf = Vec::new();
        write_comparison_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("point_s,point_v,model,value,delta_pct,vega,vanna,volga,implied_vol_pct\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
