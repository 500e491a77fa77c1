//! Explicit time-stepping for the linear pricing PDE
//!
//! ```text
//! u_t = r S u_S + (kappa (vbar - omega v) + d(S, v, t)) u_v
//!     + 1/2 v S^2 u_SS + 1/2 eta^2 v u_vv + eta rho v S u_Sv - r u + f(S, v, t)
//! ```
//!
//! in time-to-go, where `d` is an extra variance drift and `f` a running
//! source. Heston's PDE is `d = f = 0`; pricing against a market driver uses
//! `d = kappa Q F_v`; a policy-improvement inner solve uses `d = pi` and
//! `f = -pi^2 / (4 kappa Q)`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_boundaries, build_terminal, cfl_check, Field, GridSpec, PayoffSpec};
use crate::params::ModelParams;

/// Default number of steps between stored vega slices.
pub const DEFAULT_VEGA_STRIDE: usize = 100;

/// Fields sampled at increasing time-to-go stamps; lookups pick the nearest
/// stamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeFields {
    stamps: Vec<f64>,
    fields: Vec<Field>,
}

impl TimeFields {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stamp: f64, field: Field) {
        if let Some(&last) = self.stamps.last() {
            assert!(stamp > last, "stamps must be strictly increasing");
        }
        self.stamps.push(stamp);
        self.fields.push(field);
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Field)> {
        self.stamps.iter().copied().zip(&self.fields)
    }

    /// Index of the stamp closest to `t`; ties go to the earlier stamp.
    pub fn nearest_index(&self, t: f64) -> Option<usize> {
        if self.stamps.is_empty() {
            return None;
        }
        let pos = self.stamps.partition_point(|&s| s < t);
        if pos == 0 {
            return Some(0);
        }
        if pos == self.stamps.len() {
            return Some(pos - 1);
        }
        let (lo, hi) = (self.stamps[pos - 1], self.stamps[pos]);
        Some(if t - lo <= hi - t { pos - 1 } else { pos })
    }

    pub fn nearest(&self, t: f64) -> Option<&Field> {
        self.nearest_index(t).map(|k| &self.fields[k])
    }

    pub fn map(&self, f: impl Fn(&Field) -> Field) -> TimeFields {
        TimeFields {
            stamps: self.stamps.clone(),
            fields: self.fields.iter().map(f).collect(),
        }
    }
}

/// A solved PDE: today's values plus the vega field `du/dv` sampled over
/// time-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub values: Field,
    pub vega: TimeFields,
    pub grid: GridSpec,
    pub params: ModelParams,
}

impl Surface {
    /// Bilinear interpolation of the final slice; exact at nodes.
    pub fn value_at(&self, s: f64, v: f64) -> Result<f64> {
        bilinear(&self.values, &self.grid, s, v)
    }

    /// `dF/dv` at `(s, v)` and time-to-go `tau`: bilinear in space, nearest
    /// stored stamp in time. Points outside the rectangle are clamped to it;
    /// the flag reports whether clamping happened.
    pub fn vega_at(&self, s: f64, v: f64, tau: f64) -> (f64, bool) {
        let g = &self.grid;
        let cs = s.clamp(g.s_min, g.s_max);
        let cv = v.clamp(g.v_min, g.v_max);
        let clamped = cs != s || cv != v;
        let value = match self.vega.nearest(tau) {
            Some(field) => bilinear(field, g, cs, cv).unwrap_or(0.0),
            None => 0.0,
        };
        (value, clamped)
    }

    /// Writes `final.csv`, one CSV per vega slice, `manifest.csv` listing
    /// `(stamp, file)` and `surface.toml` with the grid and parameters.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.values
            .write_csv(&self.grid, BufWriter::new(File::create(dir.join("final.csv"))?))?;
        let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
        manifest.write_record(["stamp", "file"])?;
        for (k, (stamp, field)) in self.vega.iter().enumerate() {
            let name = format!("vega_{k:05}.csv");
            field.write_csv(&self.grid, BufWriter::new(File::create(dir.join(&name))?))?;
            manifest.write_record([stamp.to_string(), name])?;
        }
        manifest.flush()?;
        let meta = SurfaceMeta {
            grid: self.grid,
            model: self.params,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Parse {
            path: dir.join("surface.toml"),
            reason: e.to_string(),
        })?;
        fs::write(dir.join("surface.toml"), text)?;
        Ok(())
    }

    /// Reads a surface written by [`Surface::export`].
    pub fn import(dir: &Path) -> Result<Surface> {
        let meta_path = dir.join("surface.toml");
        let text = fs::read_to_string(&meta_path)?;
        let meta: SurfaceMeta = toml::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path,
            reason: e.to_string(),
        })?;
        let grid = meta.grid;
        let values = Field::read_csv(&grid, File::open(dir.join("final.csv"))?)?;
        let mut vega = TimeFields::new();
        let mut rdr = csv::Reader::from_path(dir.join("manifest.csv"))?;
        for record in rdr.records() {
            let record = record?;
            let stamp: f64 = record[0].parse().map_err(|_| Error::Parse {
                path: dir.join("manifest.csv"),
                reason: format!("bad stamp `{}`", &record[0]),
            })?;
            let field = Field::read_csv(&grid, File::open(dir.join(&record[1]))?)?;
            vega.push(stamp, field);
        }
        Ok(Surface {
            values,
            vega,
            grid,
            params: meta.model,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SurfaceMeta {
    grid: GridSpec,
    model: ModelParams,
}

pub(crate) fn bilinear(field: &Field, grid: &GridSpec, s: f64, v: f64) -> Result<f64> {
    if !grid.contains(s, v) {
        return Err(Error::OutOfDomain { s, v });
    }
    let x = (s - grid.s_min) / grid.ds();
    let y = (v - grid.v_min) / grid.dv();
    let i = (x.floor() as usize).min(grid.n_s - 1);
    let j = (y.floor() as usize).min(grid.n_v - 1);
    let wx = x - i as f64;
    let wy = y - j as f64;
    let lo = (1.0 - wy) * field[(i, j)] + wy * field[(i, j + 1)];
    let hi = (1.0 - wy) * field[(i + 1, j)] + wy * field[(i + 1, j + 1)];
    Ok((1.0 - wx) * lo + wx * hi)
}

/// Per-node coefficients of the linear operator, precomputed once per grid.
#[derive(Debug, Clone)]
pub struct Engine {
    grid: GridSpec,
    params: ModelParams,
    /// `r S / (2 dS)`
    c_s: Vec<f64>,
    /// `kappa (vbar - omega v)`, the base variance drift
    drift_v: Vec<f64>,
    /// `v S^2 / (2 dS^2)`
    c_ss: Vec<f64>,
    /// `eta^2 v / (2 dv^2)`
    c_vv: Vec<f64>,
    /// `eta rho v S / (4 dS dv)`
    c_sv: Vec<f64>,
    blowup_limit: f64,
}

impl Engine {
    /// Validates the inputs and checks the explicit stability bound.
    pub fn new(grid: &GridSpec, params: &ModelParams) -> Result<Self> {
        grid.validate()?;
        params.validate()?;
        let cfl = cfl_check(grid, params);
        if !cfl.holds {
            return Err(Error::Unstable {
                dt: cfl.lhs,
                bound: cfl.rhs,
            });
        }
        let (ds, dv) = (grid.ds(), grid.dv());
        let n = (grid.n_s + 1) * (grid.n_v + 1);
        let mut engine = Engine {
            grid: *grid,
            params: *params,
            c_s: Vec::with_capacity(n),
            drift_v: Vec::with_capacity(n),
            c_ss: Vec::with_capacity(n),
            c_vv: Vec::with_capacity(n),
            c_sv: Vec::with_capacity(n),
            blowup_limit: 10.0 * grid.s_max,
        };
        for i in 0..=grid.n_s {
            let s = grid.s(i);
            for j in 0..=grid.n_v {
                let v = grid.v(j);
                engine.c_s.push(params.r * s / (2.0 * ds));
                engine.drift_v.push(params.kappa * (params.vbar - params.omega * v));
                engine.c_ss.push(0.5 * v * s * s / (ds * ds));
                engine.c_vv.push(0.5 * params.eta * params.eta * v / (dv * dv));
                engine.c_sv.push(params.eta * params.rho * v * s / (4.0 * ds * dv));
            }
        }
        Ok(engine)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Magnitude beyond which a step is reported as a blow-up, scaled by the
    /// payoff quantity.
    fn limit_for(&self, payoff: &PayoffSpec) -> f64 {
        self.blowup_limit * payoff.quantity.abs().max(1.0)
    }

    /// Explicit Euler update of the interior nodes.
    ///
    /// `extras(k, u_v)` returns the extra variance drift and the source at
    /// flat node index `k`, given the central `u_v` of `prev` there. Edge nodes
    /// of `next` are left untouched. Returns the largest interior magnitude
    /// and where it occurred.
    #[inline]
    pub(crate) fn advance_interior<F>(&self, prev: &Field, next: &mut Field, mut extras: F) -> (f64, usize)
    where
        F: FnMut(usize, f64) -> (f64, f64),
    {
        let (ns, nv) = (self.grid.n_s, self.grid.n_v);
        let stride = nv + 1;
        let dt = self.grid.dt();
        let inv_2dv = 1.0 / (2.0 * self.grid.dv());
        let r = self.params.r;
        let p = prev.values();
        let out = next.values_mut();
        let mut worst = (0.0_f64, 0usize);
        for i in 1..ns {
            let row = i * stride;
            for k in row + 1..row + nv {
                let u = p[k];
                let up = p[k + stride];
                let dn = p[k - stride];
                let u_s2 = up - dn;
                let u_v = (p[k + 1] - p[k - 1]) * inv_2dv;
                let u_ss = up - 2.0 * u + dn;
                let u_vv = p[k + 1] - 2.0 * u + p[k - 1];
                let u_sv = p[k + stride + 1] - p[k + stride - 1] - p[k - stride + 1] + p[k - stride - 1];
                let (extra, source) = extras(k, u_v);
                let rate = self.c_s[k] * u_s2
                    + (self.drift_v[k] + extra) * u_v
                    + self.c_ss[k] * u_ss
                    + self.c_vv[k] * u_vv
                    + self.c_sv[k] * u_sv
                    - r * u
                    + source;
                let value = u + dt * rate;
                out[k] = value;
                // NaN compares false, so check it explicitly
                let mag = if value.is_nan() { f64::INFINITY } else { value.abs() };
                if mag > worst.0 {
                    worst = (mag, k);
                }
            }
        }
        worst
    }

    pub(crate) fn check_blowup(&self, worst: (f64, usize), step: usize, payoff: &PayoffSpec) -> Result<()> {
        if worst.0 > self.limit_for(payoff) {
            let stride = self.grid.n_v + 1;
            return Err(Error::NumericalBlowup {
                step,
                i: worst.1 / stride,
                j: worst.1 % stride,
                magnitude: worst.0,
            });
        }
        Ok(())
    }

    /// One explicit step from time-to-go `tau_new - dt` to `tau_new`, followed
    /// by the payoff's boundary conditions.
    pub fn step(
        &self,
        field: &Field,
        drift_extra: Option<&Field>,
        source: Option<&Field>,
        payoff: &PayoffSpec,
        tau_new: f64,
    ) -> Result<Field> {
        for extra in [drift_extra, source].into_iter().flatten() {
            if !extra.matches(&self.grid) {
                return Err(Error::ShapeMismatch {
                    expected: self.grid.shape(),
                    actual: extra.shape(),
                });
            }
        }
        let mut next = field.clone();
        let worst = self.advance_interior(field, &mut next, |k, _| {
            (
                drift_extra.map_or(0.0, |d| d.values()[k]),
                source.map_or(0.0, |f| f.values()[k]),
            )
        });
        self.check_blowup(worst, 0, payoff)?;
        apply_boundaries(
            &mut next,
            field,
            &self.grid,
            &self.params,
            payoff,
            tau_new,
            self.grid.dt(),
        );
        Ok(next)
    }

    /// Marches `n_t` steps from the terminal payoff. Extra drift and source
    /// fields, when given, are looked up at the stamp nearest the time-to-go
    /// at the start of each step.
    pub fn solve(
        &self,
        payoff: &PayoffSpec,
        drift_extra_by_time: Option<&TimeFields>,
        source_by_time: Option<&TimeFields>,
        vega_stride: usize,
    ) -> Result<Surface> {
        let grid = self.grid;
        let mut field = build_terminal(&grid, payoff)?;
        let mut next = field.clone();
        let mut recorder = VegaRecorder::new(&grid, vega_stride);
        recorder.record(0, &field);
        for n in 0..grid.n_t {
            let tau = grid.t(n);
            let extra = drift_extra_by_time.and_then(|t| t.nearest(tau));
            let source = source_by_time.and_then(|t| t.nearest(tau));
            let worst = self.advance_interior(&field, &mut next, |k, _| {
                (
                    extra.map_or(0.0, |d| d.values()[k]),
                    source.map_or(0.0, |f| f.values()[k]),
                )
            });
            self.check_blowup(worst, n + 1, payoff)?;
            apply_boundaries(&mut next, &field, &grid, &self.params, payoff, grid.t(n + 1), grid.dt());
            std::mem::swap(&mut field, &mut next);
            recorder.record(n + 1, &field);
        }
        Ok(Surface {
            values: field,
            vega: recorder.finish(),
            grid,
            params: self.params,
        })
    }
}

/// Convenience wrapper: build an [`Engine`] and solve.
pub fn solve(
    grid: &GridSpec,
    params: &ModelParams,
    payoff: &PayoffSpec,
    drift_extra_by_time: Option<&TimeFields>,
    source_by_time: Option<&TimeFields>,
    vega_stride: usize,
) -> Result<Surface> {
    Engine::new(grid, params)?.solve(payoff, drift_extra_by_time, source_by_time, vega_stride)
}

/// Collects `du/dv` every `stride` steps and at the final step.
pub(crate) struct VegaRecorder {
    grid: GridSpec,
    stride: usize,
    slices: TimeFields,
}

impl VegaRecorder {
    pub(crate) fn new(grid: &GridSpec, stride: usize) -> Self {
        Self {
            grid: *grid,
            stride: stride.max(1),
            slices: TimeFields::new(),
        }
    }

    pub(crate) fn record(&mut self, step: usize, field: &Field) {
        if step.is_multiple_of(self.stride) || step == self.grid.n_t {
            self.slices.push(self.grid.t(step), field.d_dv(&self.grid));
        }
    }

    pub(crate) fn stride(&self) -> usize {
        self.stride
    }

    pub(crate) fn finish(self) -> TimeFields {
        self.slices
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            n_s: 20,
            n_v: 10,
            n_t: 2000,
            ..GridSpec::default()
        }
    }

    #[test]
    fn constant_field_only_discounts() {
        let g = small_grid();
        let p = ModelParams::default();
        let e = Engine::new(&g, &p).unwrap();
        let c = 7.0;
        let field = Field::filled(&g, c);
        let next = e.step(&field, None, None, &PayoffSpec::call(100.0), g.dt()).unwrap();
        for i in 1..g.n_s {
            for j in 1..g.n_v {
                assert!((next[(i, j)] - c * (1.0 - p.r * g.dt())).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_source_adds_linearly() {
        let g = small_grid();
        let p = ModelParams {
            r: 0.0,
            ..ModelParams::default()
        };
        let e = Engine::new(&g, &p).unwrap();
        let src = Field::filled(&g, 0.4);
        let next = e
            .step(&Field::zeros(&g), None, Some(&src), &PayoffSpec::call(100.0), g.dt())
            .unwrap();
        for i in 1..g.n_s {
            for j in 1..g.n_v {
                assert!((next[(i, j)] - 0.4 * g.dt()).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn zero_payoff_stays_zero() {
        let g = small_grid();
        let table = PayoffSpec::table(Field::zeros(&g));
        let surf = solve(&g, &ModelParams::default(), &table, None, None, 100).unwrap();
        assert_eq!(surf.values.max_abs(), 0.0);
        assert!(surf.vega.fields().iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn vega_stamps_cover_horizon() {
        let g = GridSpec {
            n_t: 2050,
            ..small_grid()
        };
        let surf = solve(&g, &ModelParams::default(), &PayoffSpec::call(100.0), None, None, 100).unwrap();
        let stamps = surf.vega.stamps();
        assert_eq!(stamps[0], 0.0);
        assert!((stamps.last().unwrap() - g.t_max).abs() < 1e-12);
        assert!(stamps.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(stamps.len(), 22);
    }

    #[test]
    fn unstable_grid_rejected() {
        let g = GridSpec {
            n_t: 10,
            ..small_grid()
        };
        assert!(matches!(
            Engine::new(&g, &ModelParams::default()),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn bilinear_reproduces_affine() {
        let g = small_grid();
        let f = Field::from_fn(&g, |s, v| 1.5 + 0.25 * s - 3.0 * v);
        let x = g.s(4) + 0.5 * g.ds();
        let y = g.v(6) + 0.5 * g.dv();
        let got = bilinear(&f, &g, x, y).unwrap();
        assert!((got - (1.5 + 0.25 * x - 3.0 * y)).abs() < 1e-12);
        assert_eq!(bilinear(&f, &g, g.s(3), g.v(2)).unwrap(), f[(3, 2)]);
        assert_eq!(bilinear(&f, &g, g.s_max, g.v_max).unwrap(), f[(g.n_s, g.n_v)]);
        assert!(matches!(bilinear(&f, &g, 0.1, 0.2), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn nearest_stamp_lookup() {
        let g = small_grid();
        let mut tf = TimeFields::new();
        for (k, t) in [0.0, 1.0, 2.0].into_iter().enumerate() {
            tf.push(t, Field::filled(&g, k as f64));
        }
        assert_eq!(tf.nearest_index(-1.0), Some(0));
        assert_eq!(tf.nearest_index(0.4), Some(0));
        assert_eq!(tf.nearest_index(0.6), Some(1));
        assert_eq!(tf.nearest_index(5.0), Some(2));
    }

    #[test]
    fn surface_export_round_trip() {
        let g = GridSpec {
            n_t: 1000,
            ..small_grid()
        };
        let surf = solve(&g, &ModelParams::default(), &PayoffSpec::call(110.0), None, None, 200).unwrap();
        let dir = tempfile::tempdir().unwrap();
        surf.export(dir.path()).unwrap();
        let back = Surface::import(dir.path()).unwrap();
        assert_eq!(back, surf);
    }
}
