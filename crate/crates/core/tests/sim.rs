//! Simulator determinism, coupling and degenerate cases.

mod common;

use common::flat_vega_surface;
use market_driver::params::drift_shift;
use market_driver::sim::{ensemble, positivity_report, simulate, simulate_path};
use market_driver::{GridSpec, ModelParams, SimConfig};

fn grid() -> GridSpec {
    GridSpec {
        n_s: 20,
        n_v: 20,
        ..GridSpec::default()
    }
}

#[test]
fn ensemble_paths_match_individual_runs() {
    let p = ModelParams::default();
    let vega = flat_vega_surface(&grid(), &p, 60.0);
    let cfg = SimConfig {
        n_steps: 200,
        ..SimConfig::default()
    };
    let finals = ensemble(&p, &vega, &cfg, 8, |pair| *pair.s_new.last().unwrap()).unwrap();
    for (k, s) in finals.iter().enumerate() {
        let pair = simulate_path(&p, &vega, &cfg, k as u64).unwrap();
        assert_eq!(*pair.s_new.last().unwrap(), *s);
    }
    assert_ne!(finals[0], finals[1]);
}

#[test]
fn positive_vega_lifts_variance_away_from_zero() {
    // The Euler map v -> v + kappa (vbar - v) dt + eta sqrt(v) dW is not
    // monotone in v when v is tiny, so shared-noise paths may cross there;
    // above that region the ordering of the drifts is preserved.
    let p = ModelParams::default();
    let vega = flat_vega_surface(&grid(), &p, 77.188);
    let cfg = SimConfig::default();
    let stats = ensemble(&p, &vega, &cfg, 1000, |pair| {
        let mut prior = 0.0_f64;
        for k in 1..pair.times.len() {
            if pair.v_new[k] < pair.v_heston[k] {
                prior = prior.max(pair.v_new[k - 1].max(pair.v_heston[k - 1]));
            }
        }
        (prior, pair.v_new.last().unwrap() - pair.v_heston.last().unwrap())
    })
    .unwrap();
    let crossing_level = stats.iter().map(|s| s.0).fold(0.0, f64::max);
    assert!(crossing_level < 1e-3, "crossing from v = {crossing_level}");
    let mean_gap = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    assert!(mean_gap > 0.0);
}

#[test]
fn one_step_variance_gap_is_the_drift_shift() {
    let p = ModelParams::default();
    let vega = flat_vega_surface(&grid(), &p, 77.188);
    let cfg = SimConfig {
        n_steps: 1,
        horizon: 1e-3,
        ..SimConfig::default()
    };
    let pair = simulate(&p, &vega, &cfg).unwrap();
    let gap = (pair.v_new[1] - pair.v_heston[1]) / cfg.dt();
    assert!((gap - drift_shift(&p, 77.188)).abs() < 1e-9);
    assert_eq!(pair.s_new[1], pair.s_heston[1]);
}

#[test]
fn noise_correlation_matches_rho() {
    let p = ModelParams::default();
    let vega = flat_vega_surface(&grid(), &p, 0.0);
    let cfg = SimConfig {
        n_steps: 500,
        n_paths: 400,
        ..SimConfig::default()
    };
    let r = positivity_report(&p, &vega, &cfg).unwrap();
    let n = (cfg.n_paths * cfg.n_steps) as f64;
    assert!((r.noise_corr - p.rho).abs() < 3.0 / n.sqrt(), "{}", r.noise_corr);
    assert_eq!(r.samples, cfg.n_paths * cfg.n_steps);
}

#[test]
fn variance_never_below_floor() {
    let p = ModelParams {
        eta: 0.9,
        ..ModelParams::default()
    };
    let vega = flat_vega_surface(&grid(), &p, 10.0);
    let cfg = SimConfig {
        variance_floor: 1e-4,
        n_steps: 500,
        ..SimConfig::default()
    };
    let floors = ensemble(&p, &vega, &cfg, 50, |pair| {
        pair.v_heston
            .iter()
            .chain(&pair.v_new)
            .fold(f64::INFINITY, |m, &x| m.min(x))
    })
    .unwrap();
    assert!(floors.iter().all(|&m| m >= cfg.variance_floor));
    assert!(floors.contains(&cfg.variance_floor));
}

#[test]
fn lookups_outside_the_driver_grid_are_clamped_and_counted() {
    let p = ModelParams::default();
    let g = GridSpec {
        s_min: 99.0,
        s_max: 101.0,
        ..grid()
    };
    let vega = flat_vega_surface(&g, &p, 1.0);
    let pair = simulate(&p, &vega, &SimConfig::default()).unwrap();
    assert!(pair.clamped_lookups > 0);
    assert!(pair.clamped_lookups <= pair.times.len());
}

#[test]
fn path_csv_layout() {
    let p = ModelParams::default();
    let vega = flat_vega_surface(&grid(), &p, 1.0);
    let cfg = SimConfig {
        n_steps: 3,
        ..SimConfig::default()
    };
    let mut buf = Vec::new();
    simulate(&p, &vega, &cfg).unwrap().write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "t,s_heston,v_heston,s_new,v_new,vega");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,100,0.04,100,0.04,1"));
}
