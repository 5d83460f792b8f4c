//! Learns the pendulum predictors and runs the robust and nominal controllers side by side.
//!
//!     cargo run --release --example pendulum_closed_loop [-- path/to/config.toml]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use kpc::config::ExperimentConfig;
use kpc::ocp::RobustMode;
use kpc::pipeline::{fit_report, generate_all, train, Controller, RunOptions};

fn run_example() -> kpc::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pendulum.toml")));
    let cfg = ExperimentConfig::load(&path)?;
    let started = Instant::now();
    let data = generate_all(&cfg, cfg.seed)?;
    let bank = Arc::new(train(&cfg, &data)?);
    println!("trained {} models in {:.2?}", bank.horizon() * bank.n_x(), started.elapsed());
    for e in fit_report(&bank) {
        println!(
            "  step {} x{}: norm {:.3}  delta {:.3e}  gamma {:.3}  cond {:.1e}",
            e.step, e.dim, e.rkhs_norm, e.delta, e.gamma, e.condition
        );
    }
    for mode in [RobustMode::Robust, RobustMode::Nominal] {
        let ctl = Controller::new(&cfg, Arc::clone(&bank), mode, cfg.control.srs)?;
        let opts = RunOptions {
            mode,
            ..RunOptions::from_config(&cfg)
        };
        for x0 in &cfg.control.initial_conditions {
            let log = ctl.run(x0, &opts)?;
            let s = log.summary();
            let min_x2 = log.steps.iter().map(|r| r.next_state[1]).fold(f64::INFINITY, f64::min);
            println!(
                "{mode:?} from {x0:?}: {} steps, {} violations, {} infeasible, min x2 {min_x2:.3}, final distance {:.2e}, {:.1}s",
                s.steps, s.violations, s.infeasible_steps, s.final_distance, s.wall_time_s
            );
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
