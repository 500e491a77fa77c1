//! Command-line front end: argument parsing, command dispatch, CSV artifacts
//! and the plain-text summaries printed to standard output.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_config, RunConfig};
use crate::driver::{self, PiaTrace};
use crate::engine::{self, Surface, DEFAULT_VEGA_STRIDE};
use crate::error::{Error, Result};
use crate::grid::{cfl_check, GridSpec};
use crate::params::{check_feller, check_positive_variance, parabolicity_bounds, ConditionReport};
use crate::risk::{self, GreekStencil, GreeksReport};
use crate::sim;

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "MARKET_DRIVER_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "market-driver",
    version,
    about = "Heston pricing with a market-driver feedback on variance"
)]
pub struct Cli {
    /// TOML run configuration; the bundled defaults are used when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for CSV artifacts and the run manifest.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Direct explicit march of the semilinear PDE.
    Fdm,
    /// Policy improvement over linear PDEs.
    Pia,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Condition checks: Feller, positive variance, parabolicity, stability.
    Check,
    /// Solves the driver PDE and exports its surface.
    SolveDriver {
        #[arg(long, value_enum, default_value_t = Method::Fdm)]
        method: Method,
    },
    /// Prices the configured payoff against an exported driver surface.
    Price {
        /// Driver surface directory written by `solve-driver`.
        #[arg(long)]
        driver: PathBuf,
    },
    /// Greeks of the payoff at the report point, under Heston and, with a
    /// driver surface, under the driver-adjusted model.
    Greeks {
        /// Driver surface directory written by `solve-driver`.
        #[arg(long)]
        driver: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GreekStencil::Forward)]
        stencil: GreekStencil,
    },
    /// Heston-equivalent volatility of a price for the configured payoff.
    ImpliedVol {
        /// Price to invert.
        #[arg(long)]
        target: f64,
    },
    /// Side-by-side Heston vs driver-adjusted values, Greeks and implied vols
    /// for the driver and the payoff.
    Compare {
        #[arg(long, value_enum, default_value_t = GreekStencil::Forward)]
        stencil: GreekStencil,
    },
    /// Simulates a Heston / driver-adjusted path pair and an ensemble
    /// positivity report.
    Simulate {
        /// Driver surface directory; solved from the config when omitted.
        #[arg(long)]
        driver: Option<PathBuf>,
    },
    /// Policy-improvement convergence trace against a reference surface
    /// (the direct solve when omitted).
    PiaTrace {
        /// Reference driver surface directory.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Parse { .. } | Error::Incompatible | Error::ShapeMismatch { .. } => 2,
        Error::Unstable { .. } | Error::DegenerateDiffusion { .. } => 3,
        Error::NoConvergence { .. } => 4,
        Error::NumericalBlowup { .. } => 5,
        _ => 1,
    }
}

/// Parses `args` and runs the command, writing the summary to `out`.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves the configuration for `cli`: file or bundled defaults, then the
/// output directory override.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::bundled(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    Ok(config)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(cli)?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    write_manifest(dir, &config, cli)?;
    match &cli.command {
        Command::Check => check(&config, out),
        Command::SolveDriver { method } => solve_driver(&config, *method, out),
        Command::Price { driver } => price(&config, driver, out),
        Command::Greeks { driver, stencil } => greeks(&config, driver.as_deref(), *stencil, out),
        Command::ImpliedVol { target } => implied_vol(&config, *target, out),
        Command::Compare { stencil } => compare(&config, *stencil, out),
        Command::Simulate { driver } => simulate(&config, driver.as_deref(), out),
        Command::PiaTrace { reference } => pia_trace(&config, reference.as_deref(), out),
    }
}

/// Writes `manifest.toml`: the resolved config, loadable with `--config`,
/// headed by the tool version and command line as comments.
fn write_manifest(dir: &Path, config: &RunConfig, cli: &Cli) -> Result<()> {
    let mut text = format!(
        "# market-driver {}\n# command: {:?}\n",
        env!("CARGO_PKG_VERSION"),
        cli.command
    );
    let mut resolved = config.clone();
    if let Ok(abs) = fs::canonicalize(&resolved.output_dir) {
        resolved.output_dir = abs;
    }
    text.push_str(&resolved.to_toml());
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

/// Nearest grid node to `(s, v)`.
fn snap(grid: &GridSpec, s: f64, v: f64) -> (usize, usize) {
    let i = ((s - grid.s_min) / grid.ds()).round().clamp(0.0, grid.n_s as f64) as usize;
    let j = ((v - grid.v_min) / grid.dv()).round().clamp(0.0, grid.n_v as f64) as usize;
    (i, j)
}

fn report_node(config: &RunConfig) -> (usize, usize, f64, f64) {
    let g = &config.grid;
    let (i, j) = snap(g, config.report.s, config.report.v);
    (i, j, g.s(i), g.v(j))
}

fn heston(config: &RunConfig, which: &crate::config::PayoffConfig) -> Result<Surface> {
    let payoff = which.to_spec(&config.grid)?;
    engine::solve(&config.grid, &config.model, &payoff, None, None, DEFAULT_VEGA_STRIDE)
}

fn solve_driver_direct(config: &RunConfig) -> Result<Surface> {
    let payoff = config.driver.to_spec(&config.grid)?;
    driver::solve_direct(&config.grid, &config.model, &payoff, DEFAULT_VEGA_STRIDE)
}

fn load_surface(dir: &Path, config: &RunConfig) -> Result<Surface> {
    let surface = Surface::import(dir)?;
    if surface.grid != config.grid || surface.params != config.model {
        return Err(Error::Incompatible);
    }
    Ok(surface)
}

fn write_conditions(path: &Path, rows: &[(&str, ConditionReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["condition", "lhs", "rhs", "holds", "margin"])?;
    for (name, r) in rows {
        w.write_record([
            name.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.holds.to_string(),
            r.margin.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let p = &config.model;
    let g = &config.grid;
    let feller = check_feller(p);
    let cfl = cfl_check(g, p);
    let (nu1, nu2) = parabolicity_bounds(p, g)?;
    let parabolic = ConditionReport::new(nu1, 0.0);

    let mut rows = vec![("feller", feller), ("parabolicity", parabolic), ("cfl", cfl)];
    // the positive-variance check needs the solved driver's vega
    let positive = if cfl.holds && nu1 > 0.0 {
        let d = solve_driver_direct(config)?;
        let report = check_positive_variance(p, p.q * driver::min_vega(&d));
        rows.push(("positive_variance", report));
        Some(report)
    } else {
        None
    };
    write_conditions(&config.output_dir.join("check.csv"), &rows)?;

    let line = |name: &str, r: &ConditionReport| {
        format!(
            "{name:<18} lhs = {:<12.6} rhs = {:<12.6} holds = {:<5} margin = {:.6}",
            r.lhs, r.rhs, r.holds, r.margin
        )
    };
    writeln!(out, "{}", line("feller", &feller)).map_err(io)?;
    if !feller.holds {
        writeln!(
            out,
            "  note: 2 kappa vbar = {:.6} does not exceed eta^2 = {:.6}; the Feller condition fails for these parameters",
            feller.lhs, feller.rhs
        )
        .map_err(io)?;
    }
    if let Some(r) = &positive {
        writeln!(out, "{}", line("positive variance", r)).map_err(io)?;
    }
    writeln!(
        out,
        "parabolicity       nu1 = {nu1:.6e} nu2 = {nu2:.6e} holds = {}",
        parabolic.holds
    )
    .map_err(io)?;
    writeln!(out, "{}", line("cfl (dt < bound)", &cfl)).map_err(io)?;
    if nu1 <= 0.0 {
        return Err(Error::DegenerateDiffusion { nu1 });
    }
    if !cfl.holds {
        return Err(Error::Unstable {
            dt: cfl.lhs,
            bound: cfl.rhs,
        });
    }
    Ok(())
}

fn solve_driver(config: &RunConfig, method: Method, out: &mut dyn Write) -> Result<()> {
    let dir = config.output_dir.join("driver");
    let (i, j, s, v) = report_node(config);
    let surface = match method {
        Method::Fdm => solve_driver_direct(config)?,
        Method::Pia => {
            let payoff = config.driver.to_spec(&config.grid)?;
            let (surface, trace) = driver::solve_pia(
                &config.grid,
                &config.model,
                &payoff,
                config.pia.tol,
                config.pia.max_iter,
                None,
                DEFAULT_VEGA_STRIDE,
            )?;
            trace.write_csv(fs::File::create(config.output_dir.join("pia_trace.csv"))?)?;
            writeln!(
                out,
                "policy improvement converged after {} iterations",
                trace.iterations
            )
            .map_err(io)?;
            surface
        }
    };
    surface.export(&dir)?;
    writeln!(
        out,
        "driver value at (S = {s:.4}, v = {v:.6}): {:.6}",
        surface.values[(i, j)]
    )
    .map_err(io)?;
    writeln!(out, "min dF/dv = {:.6}", driver::min_vega(&surface)).map_err(io)?;
    writeln!(out, "surface written to {}", dir.display()).map_err(io)?;
    Ok(())
}

fn price(config: &RunConfig, driver_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let drv = load_surface(driver_dir, config)?;
    let payoff = config.payoff.to_spec(&config.grid)?;
    let surface = driver::price_with_driver(&config.grid, &config.model, &payoff, &drv, DEFAULT_VEGA_STRIDE)?;
    let dir = config.output_dir.join("price");
    surface.export(&dir)?;
    let (i, j, s, v) = report_node(config);
    writeln!(out, "value at (S = {s:.4}, v = {v:.6}): {:.6}", surface.values[(i, j)]).map_err(io)?;
    writeln!(out, "surface written to {}", dir.display()).map_err(io)?;
    Ok(())
}

fn write_greeks_csv(path: &Path, rows: &[(&str, GreeksReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "value", "delta", "vega", "vanna", "volga"])?;
    for (model, g) in rows {
        w.write_record([
            model.to_string(),
            g.value.to_string(),
            g.delta.to_string(),
            g.vega.to_string(),
            g.vanna.to_string(),
            g.volga.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn greeks_table(out: &mut dyn Write, title: &str, rows: &[(&str, GreeksReport)]) -> Result<()> {
    writeln!(out, "{title}").map_err(io)?;
    writeln!(
        out,
        "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "", "Value", "Delta", "Vega", "Vanna", "Volga"
    )
    .map_err(io)?;
    for (model, g) in rows {
        writeln!(
            out,
            "{:<12} {:>10.4} {:>9.3}% {:>10.3} {:>10.4} {:>10.3}",
            model,
            g.value,
            100.0 * g.delta,
            g.vega,
            g.vanna,
            g.volga
        )
        .map_err(io)?;
    }
    Ok(())
}

fn greeks(config: &RunConfig, driver_dir: Option<&Path>, stencil: GreekStencil, out: &mut dyn Write) -> Result<()> {
    let (_, _, s, v) = report_node(config);
    let h = heston(config, &config.payoff)?;
    let mut rows = vec![("Heston", risk::greeks(&h, s, v, stencil)?)];
    if let Some(dir) = driver_dir {
        let drv = load_surface(dir, config)?;
        let payoff = config.payoff.to_spec(&config.grid)?;
        let adj = driver::price_with_driver(&config.grid, &config.model, &payoff, &drv, DEFAULT_VEGA_STRIDE)?;
        rows.push(("New model", risk::greeks(&adj, s, v, stencil)?));
    }
    write_greeks_csv(&config.output_dir.join("greeks.csv"), &rows)?;
    greeks_table(out, &format!("Greeks at S = {s:.4}, v = {v:.6}"), &rows)
}

fn implied_vol(config: &RunConfig, target: f64, out: &mut dyn Write) -> Result<()> {
    let (_, _, s, _) = report_node(config);
    let h = heston(config, &config.payoff)?;
    let vol = risk::implied_vol_from_surface(&h, target, s)?;
    let mut w = csv::Writer::from_path(config.output_dir.join("implied_vol.csv"))?;
    w.write_record(["s", "target", "implied_vol"])?;
    w.write_record([s.to_string(), target.to_string(), vol.to_string()])?;
    w.flush()?;
    writeln!(
        out,
        "implied Heston vol at S = {s:.4} for price {target}: {:.4}%",
        100.0 * vol
    )
    .map_err(io)?;
    Ok(())
}

fn compare(config: &RunConfig, stencil: GreekStencil, out: &mut dyn Write) -> Result<()> {
    let (_, _, s, v) = report_node(config);
    let (g, p) = (&config.grid, &config.model);
    let driver_payoff = config.driver.to_spec(g)?;
    let product = config.payoff.to_spec(g)?;

    let h_driver = engine::solve(g, p, &driver_payoff, None, None, DEFAULT_VEGA_STRIDE)?;
    let n_driver = driver::solve_direct(g, p, &driver_payoff, DEFAULT_VEGA_STRIDE)?;
    let h_product = engine::solve(g, p, &product, None, None, DEFAULT_VEGA_STRIDE)?;
    let n_product = driver::price_with_driver(g, p, &product, &n_driver, DEFAULT_VEGA_STRIDE)?;

    let point = [(s, v)];
    let driver_row = risk::compare_models(&h_driver, &n_driver, &point, stencil)?.remove(0);
    let product_row = risk::compare_models(&h_product, &n_product, &point, stencil)?.remove(0);

    risk::write_comparison_csv(
        std::slice::from_ref(&driver_row),
        fs::File::create(config.output_dir.join("compare_driver.csv"))?,
    )?;
    risk::write_comparison_csv(
        std::slice::from_ref(&product_row),
        fs::File::create(config.output_dir.join("compare_payoff.csv"))?,
    )?;

    greeks_table(
        out,
        &format!("Driver ({}) at S = {s:.4}, v = {v:.6}", describe(&config.driver)),
        &[("Heston", driver_row.heston), ("New model", driver_row.driver)],
    )?;
    writeln!(out).map_err(io)?;
    greeks_table(
        out,
        &format!("Payoff ({}) at S = {s:.4}, v = {v:.6}", describe(&config.payoff)),
        &[("Heston", product_row.heston), ("New model", product_row.driver)],
    )?;
    writeln!(out).map_err(io)?;
    writeln!(out, "Implied Heston volatility").map_err(io)?;
    writeln!(
        out,
        "{:<12} {:>14} {:>14}",
        "",
        describe(&config.driver),
        describe(&config.payoff)
    )
    .map_err(io)?;
    for (model, a, b) in [
        ("Heston", driver_row.heston_vol, product_row.heston_vol),
        ("New model", driver_row.driver_vol, product_row.driver_vol),
    ] {
        writeln!(out, "{:<12} {:>13.3}% {:>13.3}%", model, 100.0 * a, 100.0 * b).map_err(io)?;
    }
    Ok(())
}

fn describe(p: &crate::config::PayoffConfig) -> String {
    match p.kind {
        crate::grid::PayoffKind::Call => format!("{} call", p.strike),
        crate::grid::PayoffKind::Put => format!("{} put", p.strike),
        crate::grid::PayoffKind::Table => "table".to_string(),
    }
}

fn simulate(config: &RunConfig, driver_dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let drv = match driver_dir {
        Some(dir) => load_surface(dir, config)?,
        None => solve_driver_direct(config)?,
    };
    let pair = sim::simulate(&config.model, &drv, &config.sim)?;
    pair.write_csv(fs::File::create(config.output_dir.join("paths.csv"))?)?;
    let report = sim::positivity_report(&config.model, &drv, &config.sim)?;
    report.write_csv(fs::File::create(config.output_dir.join("positivity.csv"))?)?;

    let last = pair.times.len() - 1;
    writeln!(
        out,
        "path seed {} over {} years, {} steps",
        config.sim.seed, config.sim.horizon, config.sim.n_steps
    )
    .map_err(io)?;
    writeln!(
        out,
        "final S: Heston {:.4}, new model {:.4}",
        pair.s_heston[last], pair.s_new[last]
    )
    .map_err(io)?;
    writeln!(
        out,
        "final v: Heston {:.6}, new model {:.6}",
        pair.v_heston[last], pair.v_new[last]
    )
    .map_err(io)?;
    writeln!(out, "max |S_new - S_heston| = {:.4}", pair.max_price_gap()).map_err(io)?;
    writeln!(out, "vega lookups clamped to the grid edge: {}", pair.clamped_lookups).map_err(io)?;
    writeln!(
        out,
        "ensemble of {} paths: floor hits Heston {:.3e}, new model {:.3e}; corr(dW1, dW2) = {:.4} (rho = {})",
        report.n_paths, report.floor_hit_fraction_heston, report.floor_hit_fraction_new, report.noise_corr, report.rho
    )
    .map_err(io)?;
    Ok(())
}

fn pia_trace(config: &RunConfig, reference: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let reference = match reference {
        Some(dir) => load_surface(dir, config)?,
        None => solve_driver_direct(config)?,
    };
    let payoff = config.driver.to_spec(&config.grid)?;
    let (_, trace) = driver::solve_pia(
        &config.grid,
        &config.model,
        &payoff,
        config.pia.tol,
        config.pia.max_iter,
        Some(&reference),
        DEFAULT_VEGA_STRIDE,
    )?;
    trace.write_csv(fs::File::create(config.output_dir.join("pia_trace.csv"))?)?;
    print_trace(&trace, out)
}

fn print_trace(trace: &PiaTrace, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{:<10} {:>16}", "Iteration", "Sup-norm diff").map_err(io)?;
    for (k, d) in trace.ref_diffs.iter().enumerate() {
        writeln!(out, "{k:<10} {d:>16.6e}").map_err(io)?;
    }
    Ok(())
}
