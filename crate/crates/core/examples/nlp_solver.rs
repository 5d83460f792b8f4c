//! The bound-constrained augmented-Lagrangian solver on a small nonconvex problem: minimize the
//! Rosenbrock function inside a box and outside a disc.
//!
//!     cargo run --release --example nlp_solver

use kpc::nlp::{minimize_al, AlOptions, ConstrainedProblem, Evaluation};

struct RosenbrockOutsideDisc {
    radius: f64,
}

impl ConstrainedProblem for RosenbrockOutsideDisc {
    fn dim(&self) -> usize {
        2
    }

    fn num_constraints(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64], out: &mut Evaluation) {
        let (a, b) = (x[0], x[1]);
        out.objective = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        out.gradient[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        out.gradient[1] = 200.0 * (b - a * a);
        // r² − ‖x − (1, 1)‖² ≤ 0 keeps the iterate out of a disc around the unconstrained minimum.
        out.constraints[0] = self.radius.powi(2) - (a - 1.0).powi(2) - (b - 1.0).powi(2);
        out.jacobian[(0, 0)] = -2.0 * (a - 1.0);
        out.jacobian[(0, 1)] = -2.0 * (b - 1.0);
    }
}

fn main() {
    let problem = RosenbrockOutsideDisc { radius: 0.5 };
    let (lower, upper) = ([-2.0, -1.0], [2.0, 3.0]);
    for start in [[-1.2, 1.0], [1.8, 2.9], [0.0, -0.5]] {
        let r = minimize_al(&problem, &start, &lower, &upper, &AlOptions::default());
        println!(
            "from {start:?}: x = [{:.5}, {:.5}], f = {:.6}, g = {:.2e}, {} outer / {} inner iterations, converged {}",
            r.x[0], r.x[1], r.objective, r.constraints[0], r.outer_iterations, r.inner_iterations, r.converged
        );
    }
}
