//! Robust control of the CSTR with and without the safe relaxation strategy.
//!
//!     cargo run --release --example cstr_closed_loop [-- path/to/config.toml]

use std::path::PathBuf;
use std::sync::Arc;

use kpc::config::ExperimentConfig;
use kpc::ocp::RobustMode;
use kpc::pipeline::{generate_all, train, Controller, RunOptions, TrajectoryLog};

/// Steps with a full relaxation history, and how many of them relax no margin beyond the unrelaxed one.
fn srs_dominance(log: &TrajectoryLog) -> (usize, usize) {
    let full: Vec<_> = log.steps.iter().filter(|s| s.history_len + 1 == log.horizon).collect();
    let ok = full
        .iter()
        .filter(|s| s.margins.iter().zip(&s.unrelaxed_margins).all(|(m, u)| *m <= u + 1e-10))
        .count();
    (full.len(), ok)
}

fn run_example() -> kpc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/cstr.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let data = generate_all(&cfg, cfg.seed)?;
    let bank = Arc::new(train(&cfg, &data)?);
    let eq = cfg.equilibrium();
    println!("refined equilibrium {:?} (input {:?}, residual {:.1e})", eq.state, eq.input, eq.residual);
    for srs in [false, true] {
        let ctl = Controller::new(&cfg, Arc::clone(&bank), RobustMode::Robust, srs)?;
        let opts = RunOptions {
            mode: RobustMode::Robust,
            srs,
            ..RunOptions::from_config(&cfg)
        };
        for x0 in &cfg.control.initial_conditions {
            let log = ctl.run(x0, &opts)?;
            let s = log.summary();
            let reach = log.steps_to_reach(0.05).map_or("never".to_string(), |k| k.to_string());
            print!(
                "srs {srs:5} from {x0:?}: {} violations, {} infeasible, max margin {:.2e}, within 0.05 after {reach} steps",
                s.violations, s.infeasible_steps, s.max_feasible_margin
            );
            if srs {
                let (full, ok) = srs_dominance(&log);
                print!(", relaxed margins dominate on {ok}/{full} full-history steps");
            }
            println!(" ({:.1}s)", s.wall_time_s);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KPC_LOG_LEVEL", "warn")).init();
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
