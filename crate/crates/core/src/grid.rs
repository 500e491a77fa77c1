//! The `(S, v)` rectangle, node-valued fields over it, terminal payoffs and
//! the boundary conditions applied after every explicit step.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ConditionReport, ModelParams};

/// Rectangular discretisation of `[s_min, s_max] x [v_min, v_max]` and of the
/// time-to-go axis `[0, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub n_s: usize,
    pub n_v: usize,
    pub t_max: f64,
    pub n_t: usize,
}

impl Default for GridSpec {
    /// 100 intervals per axis puts `S = 98.255`, `v = 0.030049` on nodes
    /// (`i = 49`, `j = 3`).
    fn default() -> Self {
        Self {
            s_min: 0.5,
            s_max: 200.0,
            v_min: 0.00005,
            v_max: 1.0,
            n_s: 100,
            n_v: 100,
            t_max: 2.0,
            n_t: 30_000,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Validation {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(self.s_min > 0.0 && self.s_min.is_finite()) {
            return bad("s_min", "must be finite and > 0");
        }
        if !(self.s_max > self.s_min && self.s_max.is_finite()) {
            return bad("s_max", "must be finite and > s_min");
        }
        if !(self.v_min > 0.0 && self.v_min.is_finite()) {
            return bad("v_min", "must be finite and > 0");
        }
        if !(self.v_max > self.v_min && self.v_max.is_finite()) {
            return bad("v_max", "must be finite and > v_min");
        }
        if self.n_s < 3 {
            return bad("n_s", "must be >= 3");
        }
        if self.n_v < 3 {
            return bad("n_v", "must be >= 3");
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad("t_max", "must be finite and > 0");
        }
        if self.n_t < 1 {
            return bad("n_t", "must be >= 1");
        }
        Ok(())
    }

    pub fn ds(&self) -> f64 {
        (self.s_max - self.s_min) / self.n_s as f64
    }

    pub fn dv(&self) -> f64 {
        (self.v_max - self.v_min) / self.n_v as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.n_t as f64
    }

    /// Stock coordinate of node `i`, computed directly from the index.
    pub fn s(&self, i: usize) -> f64 {
        self.s_min + i as f64 * self.ds()
    }

    pub fn v(&self, j: usize) -> f64 {
        self.v_min + j as f64 * self.dv()
    }

    /// Time-to-go after `n` steps.
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_s + 1, self.n_v + 1)
    }

    pub fn contains(&self, s: f64, v: f64) -> bool {
        (self.s_min..=self.s_max).contains(&s) && (self.v_min..=self.v_max).contains(&v)
    }

    /// Index of the node within `tol` (relative to the spacing) of `(s, v)`.
    pub fn node_at(&self, s: f64, v: f64, tol: f64) -> Option<(usize, usize)> {
        let fi = (s - self.s_min) / self.ds();
        let fj = (v - self.v_min) / self.dv();
        let (i, j) = (fi.round(), fj.round());
        if i < 0.0 || j < 0.0 || i > self.n_s as f64 || j > self.n_v as f64 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        let close =
            (self.s(i) - s).abs() <= tol * self.ds().max(1.0) && (self.v(j) - v).abs() <= tol * self.dv().max(1.0);
        close.then_some((i, j))
    }
}

/// One scalar per lattice node, stored row-major with `S` as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n_s: usize,
    n_v: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: &GridSpec, value: f64) -> Self {
        Self {
            n_s: grid.n_s,
            n_v: grid.n_v,
            values: vec![value; (grid.n_s + 1) * (grid.n_v + 1)],
        }
    }

    pub fn from_fn(grid: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for i in 0..=grid.n_s {
            for j in 0..=grid.n_v {
                out[(i, j)] = f(grid.s(i), grid.v(j));
            }
        }
        out
    }

    /// Builds a field from raw row-major values.
    pub fn from_values(grid: &GridSpec, values: Vec<f64>) -> Result<Self> {
        let expected = (grid.n_s + 1) * (grid.n_v + 1);
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: grid.shape(),
                actual: (values.len(), 1),
            });
        }
        Ok(Self {
            n_s: grid.n_s,
            n_v: grid.n_v,
            values,
        })
    }

    /// `(n_s + 1, n_v + 1)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.n_s + 1, self.n_v + 1)
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.n_s == grid.n_s && self.n_v == grid.n_v
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * (self.n_v + 1) + j
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sup-norm of `self - other`.
    pub fn sup_diff(&self, other: &Field) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn scaled(&self, factor: f64) -> Field {
        Field {
            values: self.values.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        assert_eq!(self.shape(), other.shape());
        Field {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }

    /// `du/dv` at every node: central differences inside, second-order
    /// one-sided differences on the `v` edges.
    pub fn d_dv(&self, grid: &GridSpec) -> Field {
        let mut out = Field::zeros(grid);
        let h = grid.dv();
        let nv = self.n_v;
        for i in 0..=self.n_s {
            let row = &self.values[self.index(i, 0)..=self.index(i, nv)];
            let dst = &mut out.values[i * (nv + 1)..(i + 1) * (nv + 1)];
            dst[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * h);
            for j in 1..nv {
                dst[j] = (row[j + 1] - row[j - 1]) / (2.0 * h);
            }
            dst[nv] = (3.0 * row[nv] - 4.0 * row[nv - 1] + row[nv - 2]) / (2.0 * h);
        }
        out
    }

    /// Writes `s,v,value` rows, `S` outer.
    pub fn write_csv<W: Write>(&self, grid: &GridSpec, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "v", "value"])?;
        for i in 0..=self.n_s {
            for j in 0..=self.n_v {
                w.write_record([grid.s(i).to_string(), grid.v(j).to_string(), self[(i, j)].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a field written by [`Field::write_csv`]. Coordinates must match
    /// the grid nodes and every value must be finite.
    pub fn read_csv<R: Read>(grid: &GridSpec, reader: R) -> Result<Field> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = Vec::with_capacity((grid.n_s + 1) * (grid.n_v + 1));
        let parse_err = |reason: String| Error::Validation {
            key: "field".to_string(),
            reason,
        };
        for (k, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != 3 {
                return Err(parse_err(format!("row {k}: expected 3 columns")));
            }
            let num = |c: usize| -> Result<f64> {
                record[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("row {k}: {e}")))
            };
            let (s, v, value) = (num(0)?, num(1)?, num(2)?);
            let (i, j) = (k / (grid.n_v + 1), k % (grid.n_v + 1));
            if i > grid.n_s {
                return Err(Error::ShapeMismatch {
                    expected: grid.shape(),
                    actual: (k + 1, 1),
                });
            }
            let tol = 1e-9;
            if (s - grid.s(i)).abs() > tol * grid.s_max || (v - grid.v(j)).abs() > tol * grid.v_max {
                return Err(parse_err(format!(
                    "row {k}: coordinates ({s}, {v}) are not node ({i}, {j})"
                )));
            }
            if !value.is_finite() {
                return Err(parse_err(format!("row {k}: non-finite value")));
            }
            values.push(value);
        }
        Field::from_values(grid, values)
    }
}

impl std::ops::Index<(usize, usize)> for Field {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * (self.n_v + 1) + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Field {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * (self.n_v + 1) + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayoffKind {
    Call,
    Put,
    Table,
}

/// Terminal payoff of a product held in `quantity` units.
///
/// Call and put payoffs depend on `S` only. A table payoff supplies explicit
/// terminal values; its edges are held at the discounted terminal values
/// except on `v_min`, which follows the degenerate boundary equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffSpec {
    pub kind: PayoffKind,
    pub strike: f64,
    pub quantity: f64,
    pub table: Option<Field>,
}

impl PayoffSpec {
    pub fn call(strike: f64) -> Self {
        Self {
            kind: PayoffKind::Call,
            strike,
            quantity: 1.0,
            table: None,
        }
    }

    pub fn put(strike: f64) -> Self {
        Self {
            kind: PayoffKind::Put,
            strike,
            quantity: 1.0,
            table: None,
        }
    }

    pub fn table(values: Field) -> Self {
        Self {
            kind: PayoffKind::Table,
            strike: 0.0,
            quantity: 1.0,
            table: Some(values),
        }
    }

    pub fn with_quantity(mut self, quantity: f64) -> Self {
        self.quantity = quantity;
        self
    }

    /// Terminal value at stock level `s` for vanilla kinds.
    pub fn vanilla_value(&self, s: f64) -> f64 {
        let intrinsic = match self.kind {
            PayoffKind::Call => (s - self.strike).max(0.0),
            PayoffKind::Put => (self.strike - s).max(0.0),
            PayoffKind::Table => 0.0,
        };
        self.quantity * intrinsic
    }
}

/// Terminal values at every node.
pub fn build_terminal(grid: &GridSpec, payoff: &PayoffSpec) -> Result<Field> {
    match payoff.kind {
        PayoffKind::Call | PayoffKind::Put => {
            let mut field = Field::zeros(grid);
            for i in 0..=grid.n_s {
                let value = payoff.vanilla_value(grid.s(i));
                for j in 0..=grid.n_v {
                    field[(i, j)] = value;
                }
            }
            Ok(field)
        }
        PayoffKind::Table => {
            let table = payoff.table.as_ref().ok_or_else(|| Error::Validation {
                key: "payoff.table".to_string(),
                reason: "table payoff without values".to_string(),
            })?;
            if !table.matches(grid) {
                return Err(Error::ShapeMismatch {
                    expected: grid.shape(),
                    actual: table.shape(),
                });
            }
            if !table.is_finite() {
                return Err(Error::Validation {
                    key: "payoff.table".to_string(),
                    reason: "non-finite terminal value".to_string(),
                });
            }
            Ok(table.scaled(payoff.quantity))
        }
    }
}

/// Sets the edge nodes of `field` for time-to-go `tau`.
///
/// `field` holds the freshly updated interior for the new time level; `prev`
/// is the previous level, from which the `v_min` edge is advanced explicitly by
/// `u_t = r S u_S - r u + kappa vbar u_v` (central in `S`, second-order
/// one-sided in `v`).
/// Interior nodes are never touched.
pub fn apply_boundaries(
    field: &mut Field,
    prev: &Field,
    grid: &GridSpec,
    params: &ModelParams,
    payoff: &PayoffSpec,
    tau: f64,
    dt: f64,
) {
    let (ns, nv) = (grid.n_s, grid.n_v);
    let (ds, dv) = (grid.ds(), grid.dv());
    let r = params.r;
    let discount = (-r * tau).exp();
    let qty = payoff.quantity;

    for i in 1..ns {
        let s = grid.s(i);
        let u = prev[(i, 0)];
        let u_s = (prev[(i + 1, 0)] - prev[(i - 1, 0)]) / (2.0 * ds);
        let u_v = (-3.0 * u + 4.0 * prev[(i, 1)] - prev[(i, 2)]) / (2.0 * dv);
        field[(i, 0)] = u + dt * (r * s * u_s - r * u + params.kappa * params.vbar * u_v);
    }

    let table = payoff.table.as_ref();
    let dirichlet = |i: usize, j: usize| -> f64 {
        match payoff.kind {
            PayoffKind::Call => 0.0,
            PayoffKind::Put => qty * payoff.strike * discount,
            PayoffKind::Table => qty * table.map_or(0.0, |t| t[(i, j)]) * discount,
        }
    };

    for i in 0..=ns {
        field[(i, nv)] = match payoff.kind {
            PayoffKind::Call => qty * grid.s(i),
            _ => dirichlet(i, nv),
        };
    }
    for j in 0..=nv {
        field[(0, j)] = dirichlet(0, j);
    }
    for j in 0..=nv {
        field[(ns, j)] = match payoff.kind {
            PayoffKind::Call => field[(ns - 1, j)] + qty * ds,
            PayoffKind::Put => field[(ns - 1, j)],
            PayoffKind::Table => dirichlet(ns, j),
        };
    }
}

/// Sufficient step-size bound for the explicit scheme.
///
/// At each node the rate `v S^2/dS^2 + eta^2 v/dv^2 + |eta rho| v S/(dS dv)
/// + r S/dS + |kappa (vbar - omega v)|/dv + r` bounds the sum of the
/// off-centre stencil weights; `dt` must stay below its reciprocal everywhere.
pub fn cfl_check(grid: &GridSpec, params: &ModelParams) -> ConditionReport {
    let mut max_rate = 0.0_f64;
    for i in 0..=grid.n_s {
        for j in 0..=grid.n_v {
            max_rate = max_rate.max(explicit_rate(params, grid.ds(), grid.dv(), grid.s(i), grid.v(j)));
        }
    }
    stability_report(grid.dt(), max_rate)
}

pub(crate) fn explicit_rate(params: &ModelParams, ds: f64, dv: f64, s: f64, v: f64) -> f64 {
    let diffusion = v * s * s / (ds * ds)
        + params.eta * params.eta * v / (dv * dv)
        + (params.eta * params.rho).abs() * v * s / (ds * dv);
    let drift = (params.r * s).abs() / ds + (params.kappa * (params.vbar - params.omega * v)).abs() / dv;
    diffusion + drift + params.r.abs()
}

/// `lhs = dt`, `rhs = bound`; unlike the other condition checks this one
/// holds when `lhs < rhs`.
pub(crate) fn stability_report(dt: f64, max_rate: f64) -> ConditionReport {
    let bound = if max_rate > 0.0 { 1.0 / max_rate } else { f64::INFINITY };
    ConditionReport {
        lhs: dt,
        rhs: bound,
        holds: dt < bound,
        margin: dt - bound,
    }
}
