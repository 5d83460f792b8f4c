//! Fits kernel ridge regression to noisy samples of a one-dimensional function and prints the
//! prediction, the deterministic error bound and its parts at a few query points. Away from the
//! data the bound grows with the power function.
//!
//!     cargo run --release --example krr_error_bounds

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kpc::kernels::KernelSpec;
use kpc::regression::{Dataset, GammaPolicy, KrrModel};

fn truth(x: f64) -> f64 {
    (2.0 * x).sin() + 0.3 * x
}

fn run_example() -> kpc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = 0.02;
    let features: Vec<Vec<f64>> = (0..12).map(|k| vec![-2.0 + 4.0 * k as f64 / 11.0 + rng.gen_range(-0.05..0.05)]).collect();
    let targets = features.iter().map(|z| truth(z[0]) + rng.gen_range(-noise..=noise)).collect();
    let data = Dataset::with_uniform_noise(features, targets, noise)?;

    let spec = KernelSpec::squared_exponential(1.0, vec![0.4]);
    let model = KrrModel::fit(&data, &spec, 1e-3, GammaPolicy::Augment(3.0))?;
    println!(
        "fitted {} samples: ‖f̂‖ {:.4}, Γ {:.4}, Δ {:.4e}",
        model.len(),
        model.rkhs_norm(),
        model.gamma(),
        model.delta_const()
    );

    println!("     z    f(z)    f̂(z)   |error|      β(z)   P(z)·√(Γ²−φ)   noise term   reg. term");
    for z in [-2.5, -1.0, 0.0, 0.7, 1.9, 3.0] {
        let t = model.bound_terms(&[z])?;
        let pred = model.predict(&[z])?;
        println!(
            "{z:>6.2} {:>7.4} {:>7.4} {:>9.2e} {:>9.2e} {:>14.2e} {:>12.2e} {:>11.2e}",
            truth(z),
            pred,
            (pred - truth(z)).abs(),
            t.total(),
            t.complexity,
            t.noise,
            t.regularization
        );
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
