//! Checks the deterministic error bound and the multi-step confidence boxes against ground truths
//! with exactly known RKHS norm.
//!
//!     cargo run --release --example bound_soundness

use std::time::Instant;

use kpc::verify::{verify_bounds, verify_containment, BoundCheckOptions, ContainmentOptions};

fn run_example() -> kpc::Result<()> {
    let started = Instant::now();
    let r = verify_bounds(&BoundCheckOptions::default())?;
    println!(
        "single model: {} violations in {} trials, Γ {:.3}, mean β {:.3e}, max β {:.3e}, max error {:.3e}, min margin {:.3e} ({:.2?})",
        r.violations,
        r.trials,
        r.gamma,
        r.mean_beta,
        r.max_beta,
        r.max_abs_error,
        r.min_margin,
        started.elapsed()
    );
    let started = Instant::now();
    let c = verify_containment(&ContainmentOptions::default())?;
    for (t, (v, hw)) in c.violations_per_step.iter().zip(&c.mean_half_width_per_step).enumerate() {
        println!("step {}: {v} successors outside their box, mean half-width {hw:.3e}", t + 1);
    }
    println!("containment over {} trials took {:.2?}", c.trials, started.elapsed());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KPC_LOG_LEVEL", "warn")).init();
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
