//! Euler–Maruyama simulation of the classic Heston pair and the
//! driver-adjusted pair on one shared stream of Gaussian increments.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Surface;
use crate::error::{Error, Result};
use crate::params::{drift_shift, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub s0: f64,
    pub v0: f64,
    /// Years simulated.
    pub horizon: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub variance_floor: f64,
    /// Ensemble size for positivity diagnostics.
    pub n_paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            s0: 100.0,
            v0: 0.04,
            horizon: 0.5,
            n_steps: 2000,
            seed: 7,
            variance_floor: 0.0,
            n_paths: 1000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Validation {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.s0 > 0.0 && self.s0.is_finite()) {
            return bad("s0", "must be finite and > 0");
        }
        if !(self.v0 > 0.0 && self.v0.is_finite()) {
            return bad("v0", "must be finite and > 0");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon", "must be finite and > 0");
        }
        if self.n_steps < 1 {
            return bad("n_steps", "must be >= 1");
        }
        if self.n_paths < 1 {
            return bad("n_paths", "must be >= 1");
        }
        if self.variance_floor.is_nan() || self.variance_floor < 0.0 {
            return bad("variance_floor", "must be >= 0");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

/// Paths of both models driven by the same increments.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPair {
    pub times: Vec<f64>,
    pub s_heston: Vec<f64>,
    pub v_heston: Vec<f64>,
    pub s_new: Vec<f64>,
    pub v_new: Vec<f64>,
    /// Driver vega `dF/dv` at the driver-adjusted state.
    pub vega_along_path: Vec<f64>,
    /// Vega lookups whose state fell outside the driver's grid and was
    /// clamped to its edge.
    pub clamped_lookups: usize,
}

impl PathPair {
    /// Largest `|s_new - s_heston|` along the path.
    pub fn max_price_gap(&self) -> f64 {
        self.s_new
            .iter()
            .zip(&self.s_heston)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Writes `t,s_heston,v_heston,s_new,v_new,vega`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "s_heston", "v_heston", "s_new", "v_new", "vega"])?;
        for k in 0..self.times.len() {
            w.write_record([
                self.times[k].to_string(),
                self.s_heston[k].to_string(),
                self.v_heston[k].to_string(),
                self.s_new[k].to_string(),
                self.v_new[k].to_string(),
                self.vega_along_path[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generator for path `index`: the seed picks the key, the path index picks the
/// ChaCha stream, so paths are independent and reproducible in any order.
fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Default)]
struct StepStats {
    floor_hits_heston: usize,
    floor_hits_new: usize,
    // sums for corr(dW1, dW2)
    w: Moments,
    // sums for corr(d log S, dv) of the Heston pair
    ret: Moments,
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sx: self.sx + o.sx,
            sy: self.sy + o.sy,
            sxx: self.sxx + o.sxx,
            syy: self.syy + o.syy,
            sxy: self.sxy + o.sxy,
        }
    }

    fn corr(&self) -> f64 {
        let n = self.n as f64;
        let cov = self.sxy / n - self.sx * self.sy / (n * n);
        let vx = self.sxx / n - self.sx * self.sx / (n * n);
        let vy = self.syy / n - self.sy * self.sy / (n * n);
        cov / (vx * vy).sqrt()
    }
}

/// One Euler step of the variance with truncation at `floor`; returns the
/// pre-floor value and the floored value.
#[inline]
fn variance_step(p: &ModelParams, v: f64, shift: f64, dt: f64, dw: f64, floor: f64) -> (f64, f64) {
    let raw = v + (p.kappa * (p.vbar - v) + shift) * dt + p.eta * v.sqrt() * dw;
    (raw, raw.max(floor))
}

fn simulate_with_stats(
    params: &ModelParams,
    vega_field: &Surface,
    cfg: &SimConfig,
    path_index: u64,
    stats: &mut StepStats,
) -> PathPair {
    let n = cfg.n_steps;
    let dt = cfg.dt();
    let sqrt_dt = dt.sqrt();
    let rho_perp = (1.0 - params.rho * params.rho).max(0.0).sqrt();
    let maturity = vega_field.grid.t_max;
    let mut rng = path_rng(cfg.seed, path_index);

    let v0 = cfg.v0.max(cfg.variance_floor);
    let mut pair = PathPair {
        times: Vec::with_capacity(n + 1),
        s_heston: Vec::with_capacity(n + 1),
        v_heston: Vec::with_capacity(n + 1),
        s_new: Vec::with_capacity(n + 1),
        v_new: Vec::with_capacity(n + 1),
        vega_along_path: Vec::with_capacity(n + 1),
        clamped_lookups: 0,
    };
    let (mut sh, mut vh, mut sn, mut vn) = (cfg.s0, v0, cfg.s0, v0);
    let lookup = |s: f64, v: f64, t: f64, pair: &mut PathPair| {
        let (vega, clamped) = vega_field.vega_at(s, v, maturity - t);
        pair.clamped_lookups += clamped as usize;
        vega
    };
    let mut vega = lookup(sn, vn, 0.0, &mut pair);
    pair.times.push(0.0);
    pair.s_heston.push(sh);
    pair.v_heston.push(vh);
    pair.s_new.push(sn);
    pair.v_new.push(vn);
    pair.vega_along_path.push(vega);

    for k in 0..n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let dw1 = sqrt_dt * z1;
        let dw2 = params.rho * dw1 + rho_perp * sqrt_dt * z2;
        stats.w.push(dw1, dw2);

        let sh_next = sh + params.mu * sh * dt + vh.sqrt() * sh * dw1;
        let (raw_h, vh_next) = variance_step(params, vh, 0.0, dt, dw2, cfg.variance_floor);
        let sn_next = sn + params.mu * sn * dt + vn.sqrt() * sn * dw1;
        let (raw_n, vn_next) = variance_step(params, vn, drift_shift(params, vega), dt, dw2, cfg.variance_floor);

        stats.floor_hits_heston += (raw_h <= 0.0) as usize;
        stats.floor_hits_new += (raw_n <= 0.0) as usize;
        if sh_next > 0.0 && sh > 0.0 {
            stats.ret.push((sh_next / sh).ln(), vh_next - vh);
        }

        (sh, vh, sn, vn) = (sh_next, vh_next, sn_next, vn_next);
        let t = (k + 1) as f64 * dt;
        vega = lookup(sn, vn, t, &mut pair);
        pair.times.push(t);
        pair.s_heston.push(sh);
        pair.v_heston.push(vh);
        pair.s_new.push(sn);
        pair.v_new.push(vn);
        pair.vega_along_path.push(vega);
    }
    pair
}

/// Simulates one path pair. The driver's vega is read at time-to-go
/// `t_max - t` of its own grid, bilinear in space and nearest stamp in time.
pub fn simulate(params: &ModelParams, vega_field: &Surface, cfg: &SimConfig) -> Result<PathPair> {
    simulate_path(params, vega_field, cfg, 0)
}

/// Path `path_index` of the ensemble seeded by `cfg.seed`.
pub fn simulate_path(params: &ModelParams, vega_field: &Surface, cfg: &SimConfig, path_index: u64) -> Result<PathPair> {
    params.validate()?;
    cfg.validate()?;
    Ok(simulate_with_stats(
        params,
        vega_field,
        cfg,
        path_index,
        &mut StepStats::default(),
    ))
}

/// Ensemble diagnostics of variance positivity and noise correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositivityReport {
    pub n_paths: usize,
    pub samples: usize,
    /// Fraction of (path, step) samples whose pre-floor Heston variance was <= 0.
    pub floor_hit_fraction_heston: f64,
    pub floor_hit_fraction_new: f64,
    /// Sample correlation of the increments `(dW1, dW2)`.
    pub noise_corr: f64,
    /// Sample correlation of Heston log-returns against variance increments.
    pub return_variance_corr: f64,
    pub rho: f64,
}

impl PositivityReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "value"])?;
        for (k, v) in [
            ("n_paths", self.n_paths as f64),
            ("samples", self.samples as f64),
            ("floor_hit_fraction_heston", self.floor_hit_fraction_heston),
            ("floor_hit_fraction_new", self.floor_hit_fraction_new),
            ("noise_corr", self.noise_corr),
            ("return_variance_corr", self.return_variance_corr),
            ("rho", self.rho),
        ] {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `cfg.n_paths` path pairs.
pub fn positivity_report(params: &ModelParams, vega_field: &Surface, cfg: &SimConfig) -> Result<PositivityReport> {
    params.validate()?;
    cfg.validate()?;
    let n_paths = cfg.n_paths;
    let totals = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            let mut stats = StepStats::default();
            simulate_with_stats(params, vega_field, cfg, k, &mut stats);
            stats
        })
        .reduce(StepStats::default, |a, b| StepStats {
            floor_hits_heston: a.floor_hits_heston + b.floor_hits_heston,
            floor_hits_new: a.floor_hits_new + b.floor_hits_new,
            w: a.w.merge(b.w),
            ret: a.ret.merge(b.ret),
        });
    let samples = n_paths * cfg.n_steps;
    Ok(PositivityReport {
        n_paths,
        samples,
        floor_hit_fraction_heston: totals.floor_hits_heston as f64 / samples as f64,
        floor_hit_fraction_new: totals.floor_hits_new as f64 / samples as f64,
        noise_corr: totals.w.corr(),
        return_variance_corr: totals.ret.corr(),
        rho: params.rho,
    })
}

/// Runs `n_paths` path pairs in parallel and maps each to a scalar.
pub fn ensemble<T: Send>(
    params: &ModelParams,
    vega_field: &Surface,
    cfg: &SimConfig,
    n_paths: usize,
    f: impl Fn(&PathPair) -> T + Sync,
) -> Result<Vec<T>> {
    params.validate()?;
    cfg.validate()?;
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            f(&simulate_with_stats(
                params,
                vega_field,
                cfg,
                k,
                &mut StepStats::default(),
            ))
        })
        .collect())
}
