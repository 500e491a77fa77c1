//! Run configuration: a TOML file with one section per component.
//!
//! Omitted keys fall back to the bundled defaults ([`DEFAULT_CONFIG`]);
//! unknown keys are rejected. Validation errors name the offending key as
//! `section.key`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, PayoffKind, PayoffSpec};
use crate::params::ModelParams;
use crate::sim::SimConfig;

/// The bundled default configuration file.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelParams,
    pub grid: GridSpec,
    /// Market driver position.
    pub driver: PayoffConfig,
    /// Product priced against the driver.
    pub payoff: PayoffConfig,
    pub pia: PiaConfig,
    pub report: ReportPoint,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            model: ModelParams::default(),
            grid: GridSpec::default(),
            driver: PayoffConfig {
                strike: 120.0,
                ..PayoffConfig::default()
            },
            payoff: PayoffConfig::default(),
            pia: PiaConfig::default(),
            report: ReportPoint::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayoffConfig {
    pub kind: PayoffKind,
    pub strike: f64,
    pub quantity: f64,
    /// CSV of terminal values (`s,v,value`) for `kind = "table"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

impl Default for PayoffConfig {
    fn default() -> Self {
        Self {
            kind: PayoffKind::Call,
            strike: 100.0,
            quantity: 1.0,
            table: None,
        }
    }
}

impl PayoffConfig {
    fn validate(&self, section: &str) -> Result<()> {
        let key = |k: &str| format!("{section}.{k}");
        if !self.quantity.is_finite() {
            return Err(invalid(key("quantity"), "must be finite"));
        }
        match self.kind {
            PayoffKind::Call | PayoffKind::Put => {
                if !(self.strike.is_finite() && self.strike >= 0.0) {
                    return Err(invalid(key("strike"), "must be finite and >= 0"));
                }
            }
            PayoffKind::Table => {
                if self.table.is_none() {
                    return Err(invalid(key("table"), "required when kind = \"table\""));
                }
            }
        }
        Ok(())
    }

    /// Builds the payoff, reading the terminal table if there is one.
    pub fn to_spec(&self, grid: &GridSpec) -> Result<PayoffSpec> {
        let spec = match self.kind {
            PayoffKind::Call => PayoffSpec::call(self.strike),
            PayoffKind::Put => PayoffSpec::put(self.strike),
            PayoffKind::Table => {
                let path = self.table.as_ref().ok_or_else(|| invalid("table".into(), "missing"))?;
                let file = fs::File::open(path)?;
                PayoffSpec::table(Field::read_csv(grid, file)?)
            }
        };
        Ok(spec.with_quantity(self.quantity))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiaConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PiaConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Point at which summaries are reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportPoint {
    pub s: f64,
    pub v: f64,
}

impl Default for ReportPoint {
    fn default() -> Self {
        Self { s: 98.255, v: 0.030049 }
    }
}

fn invalid(key: String, reason: &str) -> Error {
    Error::Validation {
        key,
        reason: reason.to_string(),
    }
}

fn prefixed<T>(section: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Validation { key, reason } => Error::Validation {
            key: format!("{section}.{key}"),
            reason,
        },
        other => other,
    })
}

impl RunConfig {
    /// Parses TOML text; `origin` is only used in error messages.
    pub fn from_toml(text: &str, origin: &Path) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// The bundled defaults.
    pub fn bundled() -> RunConfig {
        RunConfig::from_toml(DEFAULT_CONFIG, Path::new("<bundled>")).expect("bundled config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        prefixed("model", self.model.validate())?;
        prefixed("grid", self.grid.validate())?;
        prefixed("sim", self.sim.validate())?;
        self.driver.validate("driver")?;
        self.payoff.validate("payoff")?;
        if !(self.pia.tol > 0.0 && self.pia.tol.is_finite()) {
            return Err(invalid("pia.tol".into(), "must be finite and > 0"));
        }
        if self.pia.max_iter < 1 {
            return Err(invalid("pia.max_iter".into(), "must be >= 1"));
        }
        if !self.grid.contains(self.report.s, self.report.v) {
            return Err(invalid("report.s".into(), "report point must lie inside the grid"));
        }
        Ok(())
    }

    /// Rewrites relative paths against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        for payoff in [&mut self.driver, &mut self.payoff] {
            if let Some(table) = payoff.table.as_mut() {
                if table.is_relative() {
                    *table = base.join(&*table);
                }
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Loads and validates a config file. Relative paths inside it resolve
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut config = RunConfig::from_toml(&text, path)?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}
