//! The file-based workflow behind the command-line tool: generate and save datasets, train and
//! save a bank, reload it, run the closed loop and write the log, CSV and SVG.
//!
//!     cargo run --release --example file_workflow -- [output-dir]

use std::path::PathBuf;
use std::sync::Arc;

use kpc::config::ExperimentConfig;
use kpc::pipeline::{
    generate_all, load_bank, load_datasets, save_bank, save_datasets, save_log, save_log_csv, train, Controller,
    RunOptions,
};
use kpc::plot::render_svg;

fn run_example() -> kpc::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("kpc_workflow"));
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum.toml");
    let cfg = ExperimentConfig::load(&path)?;

    save_datasets(&generate_all(&cfg, cfg.seed)?, &out.join("data"))?;
    let data = load_datasets(&out.join("data"), cfg.data.horizon)?;
    let manifest = save_bank(&train(&cfg, &data)?, &out.join("bank"))?;
    let bank = Arc::new(load_bank(&manifest)?);
    println!("bank written to {}", manifest.display());

    let opts = RunOptions {
        steps: 15,
        ..RunOptions::from_config(&cfg)
    };
    let ctl = Controller::new(&cfg, bank, opts.mode, opts.srs)?;
    let log = ctl.run(&cfg.control.initial_conditions[0], &opts)?;
    save_log(&log, &out.join("run.json"))?;
    save_log_csv(&log, &out.join("run.csv"))?;
    std::fs::write(out.join("run.svg"), render_svg(&log))?;
    let s = log.summary();
    println!(
        "{} steps, {} violations, final distance {:.3e}; log, CSV and SVG in {}",
        s.steps,
        s.violations,
        s.final_distance,
        out.display()
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KPC_LOG_LEVEL", "warn")).init();
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
