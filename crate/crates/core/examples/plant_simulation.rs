//! The two benchmark plants: refined equilibria and open-loop RK4 rollouts.
//!
//!     cargo run --release --example plant_simulation

use kpc::plants::{equilibrium_solve, CstrParams, PendulumParams, Plant};

fn run_example() -> kpc::Result<()> {
    let cstr = Plant::Cstr(CstrParams::default());
    let eq = equilibrium_solve(|x, u| cstr.rhs(x, u), &[2.14, 1.09], &[14.19]);
    println!(
        "CSTR equilibrium for u = 14.19: ({:.5}, {:.5}), residual {:.1e} (guess residual {:.1e})",
        eq.state[0], eq.state[1], eq.residual, eq.guess_residual
    );
    let mut x = vec![1.2, 0.6];
    for k in 0..=6 {
        println!("  CSTR after {:>2} samples: c_A {:.4}, c_B {:.4}", 5 * k, x[0], x[1]);
        for _ in 0..5 {
            x = cstr.step(&x, &eq.input)?;
        }
    }

    let pendulum = Plant::Pendulum(PendulumParams::default());
    let up = equilibrium_solve(|x, u| pendulum.rhs(x, u), &[0.05, 0.0], &[0.0]);
    println!("pendulum upright equilibrium: ({:.2e}, {:.2e})", up.state[0], up.state[1]);
    // Unforced, a small tilt grows: the upright position is unstable.
    for n in [1, 2, 4, 6, 8] {
        let x = pendulum.rollout(&[0.01, 0.0], &vec![0.0; n])?;
        println!("  pendulum after {n} samples: angle {:+.4}, rate {:+.4}", x[0], x[1]);
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
