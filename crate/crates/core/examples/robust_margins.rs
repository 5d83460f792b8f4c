//! Multi-step confidence boxes of a pendulum predictor bank, their support-function margins
//! against the state constraints, and the tightening obtained by intersecting them with the
//! boxes predicted from past closed-loop steps.
//!
//!     cargo run --release --example robust_margins

use std::path::PathBuf;

use kpc::config::ExperimentConfig;
use kpc::pipeline::{generate_all, train};
use kpc::robust::{intersect_boxes, robustify_step, srs_collect, HistoryEntry, SrsHistory};

fn run_example() -> kpc::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum.toml");
    let cfg = ExperimentConfig::load(&path)?;
    let bank = train(&cfg, &generate_all(&cfg, cfg.seed)?)?;
    let state_set = cfg.state_set()?;

    let x0 = [0.2, 0.0];
    let plan = [-0.05, -0.05, 0.0, 0.0];
    for t in 1..=bank.horizon() {
        let b = bank.confidence_box(t, &x0, &plan[..t])?;
        let margins = robustify_step(&state_set, &b)?;
        let worst = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "step {t}: center {:?}, half-widths {:?}, worst margin {worst:.3e} ({})",
            b.center().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            b.half_widths().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            if worst <= 0.0 { "inside" } else { "outside" }
        );
    }

    // Pretend the loop already applied two inputs from the true plant.
    let mut history = SrsHistory::for_horizon(bank.horizon());
    let mut x = vec![0.25, 0.1];
    for time in 0..2 {
        let u = vec![-0.05];
        let next = cfg.plant.step(&x, &u)?;
        history.push(HistoryEntry { time, state: x, input: u });
        x = next;
    }
    let now = 2;
    for t in 1..=bank.horizon() {
        let boxes = srs_collect(&bank, &history, now, t, &x, &plan[..t])?;
        let own = &boxes[0];
        let tight = intersect_boxes(&boxes)?;
        let shrink: Vec<String> = own
            .half_widths()
            .iter()
            .zip(tight.half_widths())
            .map(|(a, b)| format!("{:.1}%", 100.0 * (1.0 - b / a)))
            .collect();
        println!("step {t}: {} candidate boxes, half-width reduction {shrink:?}", boxes.len());
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
