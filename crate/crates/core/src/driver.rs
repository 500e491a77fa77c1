//! The semilinear market-driver PDE
//!
//! ```text
//! u_t = L u + kappa Q u_v^2
//! ```
//!
//! (with `L` the Heston operator in time-to-go) solved two ways: a direct
//! explicit march with the nonlinearity frozen at the previous time level,
//! and policy improvement, where each iterate solves the linear problem with
//! frozen policy `pi_i = 2 kappa Q d_v u_{i-1}`:
//!
//! ```text
//! u_t = L u + pi_i u_v - pi_i^2 / (4 kappa Q)
//! ```
//!
//! Both solvers take their edge values from the Heston solution of the same
//! payoff, so every iterate and the direct solution agree on the parabolic
//! boundary.

use std::io::Write;

use rayon::prelude::*;

use crate::engine::{Engine, Surface, TimeFields, VegaRecorder};
use crate::error::{Error, Result};
use crate::grid::{apply_boundaries, build_terminal, Field, GridSpec, PayoffSpec};
use crate::params::ModelParams;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 10;

/// Iterates computed in the first policy-improvement pass; a second pass up to
/// `max_iter` runs only if none of these converged.
const FIRST_PASS_LEVELS: usize = 5;

/// Convergence record of a policy-improvement run.
///
/// `iter_diffs[k]` is the sup-norm of `u_{k+1} - u_k` on the final slice;
/// `ref_diffs[k]` is the sup-norm of `u_k - u_ref` (empty without a reference).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PiaTrace {
    pub iterations: usize,
    pub iter_diffs: Vec<f64>,
    pub ref_diffs: Vec<f64>,
    /// Largest `|pi_k|` over stored time slices, for `k = 0..=iterations`.
    pub policy_sup: Vec<f64>,
    /// Largest difference quotient of `pi_k` between neighbouring nodes.
    pub policy_lipschitz: Vec<f64>,
}

impl PiaTrace {
    /// Writes `iteration,iter_diff,ref_diff`; iteration 0 has no `iter_diff`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "iter_diff", "ref_diff"])?;
        for k in 0..=self.iterations {
            let iter = if k == 0 {
                String::new()
            } else {
                self.iter_diffs[k - 1].to_string()
            };
            let reference = self.ref_diffs.get(k).map(f64::to_string).unwrap_or_default();
            w.write_record([k.to_string(), iter, reference])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Policy `pi = 2 kappa Q dF/dv` sampled over time-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    pub values: TimeFields,
}

impl PolicyField {
    pub fn from_surface(surface: &Surface) -> Self {
        let factor = 2.0 * surface.params.kappa * surface.params.q;
        Self {
            values: surface.vega.map(|f| f.scaled(factor)),
        }
    }

    pub fn min(&self) -> f64 {
        self.values
            .fields()
            .iter()
            .map(Field::min)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.fields().iter().map(Field::max_abs).fold(0.0, f64::max)
    }
}

/// Explicit march of the semilinear PDE with `u_v` taken from the previous
/// time level. Edge values are copied from a Heston solve marched alongside.
pub fn solve_direct(grid: &GridSpec, params: &ModelParams, payoff: &PayoffSpec, vega_stride: usize) -> Result<Surface> {
    let engine = Engine::new(grid, params)?;
    let kq = params.kappa * params.q;
    let mut heston = build_terminal(grid, payoff)?;
    let mut heston_next = heston.clone();
    let mut field = heston.clone();
    let mut next = heston.clone();
    let mut recorder = VegaRecorder::new(grid, vega_stride);
    recorder.record(0, &field);
    for n in 0..grid.n_t {
        let worst = engine.advance_interior(&heston, &mut heston_next, |_, _| (0.0, 0.0));
        engine.check_blowup(worst, n + 1, payoff)?;
        apply_boundaries(
            &mut heston_next,
            &heston,
            grid,
            params,
            payoff,
            grid.t(n + 1),
            grid.dt(),
        );

        let worst = engine.advance_interior(&field, &mut next, |_, u_v| (kq * u_v, 0.0));
        engine.check_blowup(worst, n + 1, payoff)?;
        copy_edges(&mut next, &heston_next, grid);

        std::mem::swap(&mut heston, &mut heston_next);
        std::mem::swap(&mut field, &mut next);
        recorder.record(n + 1, &field);
    }
    Ok(Surface {
        values: field,
        vega: recorder.finish(),
        grid: *grid,
        params: *params,
    })
}

/// Policy improvement starting from `pi_0 = 0`, so iterate 0 is the Heston
/// solution.
///
/// Stops at the first iterate `i >= 1` with `|u_i - u_{i-1}|_inf < tol` and
/// returns that iterate. With a reference surface the trace also records the
/// distance of every iterate to it.
pub fn solve_pia(
    grid: &GridSpec,
    params: &ModelParams,
    payoff: &PayoffSpec,
    tol: f64,
    max_iter: usize,
    reference: Option<&Surface>,
    vega_stride: usize,
) -> Result<(Surface, PiaTrace)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Validation {
            key: "pia.tol".to_string(),
            reason: "must be > 0".to_string(),
        });
    }
    if max_iter == 0 {
        return Err(Error::Validation {
            key: "pia.max_iter".to_string(),
            reason: "must be >= 1".to_string(),
        });
    }
    if let Some(r) = reference {
        if !r.values.matches(grid) {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                actual: r.values.shape(),
            });
        }
    }
    let engine = Engine::new(grid, params)?;

    let mut passes = vec![max_iter.min(FIRST_PASS_LEVELS)];
    if max_iter > FIRST_PASS_LEVELS {
        passes.push(max_iter);
    }
    let mut last = None;
    for top in passes {
        let run = run_cascade(&engine, payoff, top, vega_stride)?;
        let diffs: Vec<f64> = (1..=top).map(|k| run.finals[k].sup_diff(&run.finals[k - 1])).collect();
        if let Some(pos) = diffs.iter().position(|&d| d < tol) {
            let iterations = pos + 1;
            let trace = PiaTrace {
                iterations,
                iter_diffs: diffs[..iterations].to_vec(),
                ref_diffs: reference
                    .map(|r| {
                        run.finals[..=iterations]
                            .iter()
                            .map(|f| f.sup_diff(&r.values))
                            .collect()
                    })
                    .unwrap_or_default(),
                policy_sup: run.policy_sup[..=iterations].to_vec(),
                policy_lipschitz: run.policy_lipschitz[..=iterations].to_vec(),
            };
            let mut run = run;
            let surface = Surface {
                values: run.finals.swap_remove(iterations),
                vega: run.vega.swap_remove(iterations),
                grid: *grid,
                params: *params,
            };
            return Ok((surface, trace));
        }
        last = diffs.last().copied();
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_diff: last.unwrap_or(f64::NAN),
    })
}

struct CascadeRun {
    finals: Vec<Field>,
    vega: Vec<TimeFields>,
    policy_sup: Vec<f64>,
    policy_lipschitz: Vec<f64>,
}

/// Marches iterates `0..=top` together.
///
/// Iterate `k` needs `pi_k = 2 kappa Q d_v u_{k-1}` at every time level; the
/// previous iterate's field at that level is exactly what the lower entry of
/// the cascade holds, so no policy history has to be stored.
fn run_cascade(engine: &Engine, payoff: &PayoffSpec, top: usize, vega_stride: usize) -> Result<CascadeRun> {
    let grid = *engine.grid();
    let params = *engine.params();
    let two_kq = 2.0 * params.kappa * params.q;
    let inv_4kq = if params.q != 0.0 {
        1.0 / (4.0 * params.kappa * params.q)
    } else {
        0.0
    };
    let inv_2dv = 1.0 / (2.0 * grid.dv());
    let levels = top + 1;

    let terminal = build_terminal(&grid, payoff)?;
    let mut cur = vec![terminal.clone(); levels];
    let mut next = vec![terminal; levels];
    let mut recorders: Vec<VegaRecorder> = (0..levels).map(|_| VegaRecorder::new(&grid, vega_stride)).collect();
    let mut policy_sup = vec![0.0_f64; levels];
    let mut policy_lipschitz = vec![0.0_f64; levels];
    for (rec, f) in recorders.iter_mut().zip(&cur).skip(1) {
        rec.record(0, f);
    }

    let stride = grid.n_v + 1;
    for n in 0..grid.n_t {
        let worst: Vec<(f64, usize)> = next
            .par_iter_mut()
            .enumerate()
            .map(|(level, out)| {
                if level == 0 || params.q == 0.0 {
                    engine.advance_interior(&cur[level], out, |_, _| (0.0, 0.0))
                } else {
                    let lower = cur[level - 1].values();
                    engine.advance_interior(&cur[level], out, |k, _| {
                        let pi = two_kq * (lower[k + 1] - lower[k - 1]) * inv_2dv;
                        (pi, -pi * pi * inv_4kq)
                    })
                }
            })
            .collect();
        for w in worst {
            engine.check_blowup(w, n + 1, payoff)?;
        }
        apply_boundaries(&mut next[0], &cur[0], &grid, &params, payoff, grid.t(n + 1), grid.dt());
        let (base, rest) = next.split_at_mut(1);
        for f in rest {
            copy_edges(f, &base[0], &grid);
        }

        if n % recorders[0].stride() == 0 && params.q != 0.0 {
            // policy in force during this step, interior nodes only
            for level in 1..levels {
                let (sup, lip) = policy_stats(&cur[level - 1], &grid, two_kq, stride);
                policy_sup[level] = policy_sup[level].max(sup);
                policy_lipschitz[level] = policy_lipschitz[level].max(lip);
            }
        }

        std::mem::swap(&mut cur, &mut next);
        for (rec, f) in recorders.iter_mut().zip(&cur).skip(1) {
            rec.record(n + 1, f);
        }
    }

    let mut vega: Vec<TimeFields> = recorders.into_iter().map(VegaRecorder::finish).collect();
    // iterate 0 is never returned; keep the slot so indices line up
    vega[0] = TimeFields::new();
    Ok(CascadeRun {
        finals: cur,
        vega,
        policy_sup,
        policy_lipschitz,
    })
}

/// Sup-norm and largest neighbour difference quotient of `2 kappa Q d_v u`
/// over interior nodes.
fn policy_stats(lower: &Field, grid: &GridSpec, two_kq: f64, stride: usize) -> (f64, f64) {
    let u = lower.values();
    let inv_2dv = 1.0 / (2.0 * grid.dv());
    let pi = |k: usize| two_kq * (u[k + 1] - u[k - 1]) * inv_2dv;
    let (ds, dv) = (grid.ds(), grid.dv());
    let mut sup = 0.0_f64;
    let mut lip = 0.0_f64;
    for i in 1..grid.n_s {
        for j in 1..grid.n_v {
            let k = i * stride + j;
            let p = pi(k);
            sup = sup.max(p.abs());
            if i + 1 < grid.n_s {
                lip = lip.max((pi(k + stride) - p).abs() / ds);
            }
            if j + 1 < grid.n_v {
                lip = lip.max((pi(k + 1) - p).abs() / dv);
            }
        }
    }
    (sup, lip)
}

fn copy_edges(dst: &mut Field, src: &Field, grid: &GridSpec) {
    let (ns, nv) = (grid.n_s, grid.n_v);
    for j in 0..=nv {
        dst[(0, j)] = src[(0, j)];
        dst[(ns, j)] = src[(ns, j)];
    }
    for i in 1..ns {
        dst[(i, 0)] = src[(i, 0)];
        dst[(i, nv)] = src[(i, nv)];
    }
}

/// Minimum of `dF/dv` over every stored slice and node.
pub fn min_vega(surface: &Surface) -> f64 {
    let m = surface
        .vega
        .fields()
        .iter()
        .map(Field::min)
        .fold(f64::INFINITY, f64::min);
    if m.is_finite() {
        m
    } else {
        0.0
    }
}

/// Prices `payoff` under the driver-adjusted dynamics: the linear PDE with
/// extra variance drift `kappa Q F_v`, where `F_v` comes from the driver's
/// stored vega slices (nearest stamp).
///
/// As for the driver itself, edge values are taken from the Heston solution of
/// the same payoff, marched alongside. Pricing the driver's own payoff against
/// its vega therefore reproduces [`solve_direct`] up to the time sampling of
/// the vega slices.
pub fn price_with_driver(
    grid: &GridSpec,
    params: &ModelParams,
    payoff: &PayoffSpec,
    driver: &Surface,
    vega_stride: usize,
) -> Result<Surface> {
    if driver.grid != *grid || driver.params != *params {
        return Err(Error::Incompatible);
    }
    if driver.vega.is_empty() {
        return Err(Error::Validation {
            key: "driver".to_string(),
            reason: "driver surface has no vega slices".to_string(),
        });
    }
    let engine = Engine::new(grid, params)?;
    let kq = params.kappa * params.q;
    let mut heston = build_terminal(grid, payoff)?;
    let mut heston_next = heston.clone();
    let mut field = heston.clone();
    let mut next = heston.clone();
    let mut recorder = VegaRecorder::new(grid, vega_stride);
    recorder.record(0, &field);
    for n in 0..grid.n_t {
        let worst = engine.advance_interior(&heston, &mut heston_next, |_, _| (0.0, 0.0));
        engine.check_blowup(worst, n + 1, payoff)?;
        apply_boundaries(
            &mut heston_next,
            &heston,
            grid,
            params,
            payoff,
            grid.t(n + 1),
            grid.dt(),
        );

        let driver_vega = driver.vega.nearest(grid.t(n)).map(Field::values).unwrap_or_default();
        let worst = engine.advance_interior(&field, &mut next, |k, _| (kq * driver_vega[k], 0.0));
        engine.check_blowup(worst, n + 1, payoff)?;
        copy_edges(&mut next, &heston_next, grid);

        std::mem::swap(&mut heston, &mut heston_next);
        std::mem::swap(&mut field, &mut next);
        recorder.record(n + 1, &field);
    }
    Ok(Surface {
        values: field,
        vega: recorder.finish(),
        grid: *grid,
        params: *params,
    })
}
