//! Small dense nonlinear programming: an augmented-Lagrangian outer loop for inequality
//! constraints around a bound-constrained projected quasi-Newton minimizer.
//!
//! Problems are `min f(x)  s.t.  g(x) ≤ 0,  lower ≤ x ≤ upper` with analytic gradients. The
//! inequalities enter through the squared-hinge (Powell–Hestenes–Rockafellar) term
//! `(1/2ρ) Σ [max(0, μ_i + ρ g_i)² − μ_i²]`.

use nalgebra::{DMatrix, DVector};

/// Values and first derivatives at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub constraints: Vec<f64>,
    /// m × n, row i is ∇g_i.
    pub jacobian: DMatrix<f64>,
}

impl Evaluation {
    pub fn zeros(n: usize, m: usize) -> Self {
        Evaluation {
            objective: 0.0,
            gradient: vec![0.0; n],
            constraints: vec![0.0; m],
            jacobian: DMatrix::zeros(m, n),
        }
    }

    fn is_finite(&self) -> bool {
        self.objective.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.constraints.iter().all(|v| v.is_finite())
            && self.jacobian.iter().all(|v| v.is_finite())
    }

    pub fn max_violation(&self) -> f64 {
        self.constraints.iter().fold(0.0f64, |a, g| a.max(*g))
    }
}

pub trait ConstrainedProblem {
    fn dim(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn evaluate(&self, x: &[f64], out: &mut Evaluation);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Target for the largest constraint value at termination.
    pub feas_tol: f64,
    /// Infinity norm of the projected gradient of the inner problem at termination.
    pub opt_tol: f64,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            max_outer: 30,
            max_inner: 500,
            feas_tol: 1e-7,
            opt_tol: 1e-9,
            rho_init: 10.0,
            rho_growth: 10.0,
            rho_max: 1e12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Feasibility and stationarity targets were met before the iteration caps.
    pub converged: bool,
    /// A non-finite value was met at the starting point.
    pub non_finite: bool,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, l), u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*l, *u);
    }
}

struct Merit<'a, P: ConstrainedProblem + ?Sized> {
    problem: &'a P,
    mu: &'a [f64],
    rho: f64,
}

impl<P: ConstrainedProblem + ?Sized> Merit<'_, P> {
    /// Returns the merit value and writes its gradient; non-finite evaluations give +∞.
    fn eval(&self, x: &[f64], scratch: &mut Evaluation, grad: &mut [f64]) -> f64 {
        self.problem.evaluate(x, scratch);
        if !scratch.is_finite() {
            return f64::INFINITY;
        }
        let mut val = scratch.objective;
        grad.copy_from_slice(&scratch.gradient);
        for (i, (&g, &mu)) in scratch.constraints.iter().zip(self.mu).enumerate() {
            let shifted = mu + self.rho * g;
            if shifted > 0.0 {
                val += (shifted * shifted - mu * mu) / (2.0 * self.rho);
                for (j, gr) in grad.iter_mut().enumerate() {
                    *gr += shifted * scratch.jacobian[(i, j)];
                }
            } else {
                val -= mu * mu / (2.0 * self.rho);
            }
        }
        val
    }
}

struct InnerOutcome {
    iterations: usize,
    converged: bool,
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (l, u))| ((xi - gi).clamp(*l, *u) - xi).abs())
        .fold(0.0, f64::max)
}

/// Bound-constrained BFGS with a projected Armijo search; `x` is updated in place.
fn minimize_bounded<P: ConstrainedProblem + ?Sized>(
    merit: &Merit<'_, P>,
    x: &mut [f64],
    lower: &[f64],
    upper: &[f64],
    max_iter: usize,
    tol: f64,
    scratch: &mut Evaluation,
) -> InnerOutcome {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut val = merit.eval(x, scratch, &mut g);
    if !val.is_finite() {
        return InnerOutcome {
            iterations: 0,
            converged: false,
        };
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    for it in 0..max_iter {
        if projected_gradient_norm(x, &g, lower, upper) <= tol {
            return InnerOutcome {
                iterations: it,
                converged: true,
            };
        }
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
            .collect();
        if fresh {
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            h = DMatrix::identity(n, n) * (0.1 / gmax);
        }
        let mut accepted = false;
        let mut vn = f64::INFINITY;
        for attempt in 0..2 {
            let mut d = vec![0.0; n];
            for i in (0..n).filter(|&i| !active[i]) {
                d[i] = -(0..n).filter(|&j| !active[j]).map(|j| h[(i, j)] * g[j]).sum::<f64>();
            }
            let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 || attempt == 1 {
                let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
                h = DMatrix::identity(n, n) * (0.1 / gmax);
                for i in 0..n {
                    d[i] = if active[i] { 0.0 } else { -h[(i, i)] * g[i] };
                }
                slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
                fresh = true;
            }
            if slope >= 0.0 {
                break;
            }
            let mut tau = 1.0;
            for _ in 0..40 {
                for i in 0..n {
                    xn[i] = x[i] + tau * d[i];
                }
                project(&mut xn, lower, upper);
                let decrease: f64 = g.iter().zip(xn.iter().zip(x.iter())).map(|(gi, (a, b))| gi * (a - b)).sum();
                vn = merit.eval(&xn, scratch, &mut gn);
                if vn.is_finite() && vn <= val + 1e-4 * decrease {
                    accepted = true;
                    break;
                }
                tau *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            return InnerOutcome {
                iterations: it,
                converged: false,
            };
        }
        let s = DVector::from_iterator(n, xn.iter().zip(x.iter()).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let improvement = val - vn;
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        val = vn;
        if improvement.abs() <= 1e-16 * val.abs().max(1.0) && s.amax() <= 1e-15 {
            return InnerOutcome {
                iterations: it + 1,
                converged: projected_gradient_norm(x, &g, lower, upper) <= tol.sqrt(),
            };
        }
    }
    InnerOutcome {
        iterations: max_iter,
        converged: false,
    }
}

/// Minimizes `problem` from `x0` (projected onto the bounds first).
pub fn minimize_al<P: ConstrainedProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &AlOptions,
) -> AlResult {
    let n = problem.dim();
    let m = problem.num_constraints();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut scratch = Evaluation::zeros(n, m);
    problem.evaluate(&x, &mut scratch);
    if !scratch.is_finite() {
        return AlResult {
            x,
            objective: f64::NAN,
            constraints: scratch.constraints,
            max_violation: f64::INFINITY,
            outer_iterations: 0,
            inner_iterations: 0,
            converged: false,
            non_finite: true,
        };
    }
    let mut mu = vec![0.0; m];
    let mut rho = opts.rho_init;
    let mut prev_progress = f64::INFINITY;
    let mut inner_total = 0;
    let mut converged = false;
    let mut outer = 0;
    while outer < opts.max_outer {
        outer += 1;
        let merit = Merit {
            problem,
            mu: &mu,
            rho,
        };
        let inner = minimize_bounded(&merit, &mut x, lower, upper, opts.max_inner, opts.opt_tol, &mut scratch);
        inner_total += inner.iterations;
        problem.evaluate(&x, &mut scratch);
        if !scratch.is_finite() {
            break;
        }
        let viol = scratch.max_violation();
        // Complementarity-aware progress measure max_i |max(g_i, −μ_i/ρ)|.
        let progress = scratch
            .constraints
            .iter()
            .zip(&mu)
            .map(|(g, mu_i)| g.max(-mu_i / rho).abs())
            .fold(0.0, f64::max);
        for (mu_i, g) in mu.iter_mut().zip(&scratch.constraints) {
            *mu_i = (*mu_i + rho * g).max(0.0);
        }
        if viol <= opts.feas_tol && inner.converged && progress <= opts.feas_tol.max(1e-6) {
            converged = true;
            break;
        }
        if progress > 0.25 * prev_progress || viol > opts.feas_tol {
            rho = (rho * opts.rho_growth).min(opts.rho_max);
        }
        prev_progress = progress;
    }
    problem.evaluate(&x, &mut scratch);
    AlResult {
        objective: scratch.objective,
        max_violation: scratch.max_violation(),
        constraints: scratch.constraints.clone(),
        x,
        outer_iterations: outer,
        inner_iterations: inner_total,
        converged,
        non_finite: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x−2)² + (y−1)²  s.t.  x + y ≤ 1, 0 ≤ x, y ≤ 3
    struct Disk;

    impl ConstrainedProblem for Disk {
        fn dim(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64], out: &mut Evaluation) {
            out.objective = (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2);
            out.gradient[0] = 2.0 * (x[0] - 2.0);
            out.gradient[1] = 2.0 * (x[1] - 1.0);
            out.constraints[0] = x[0] + x[1] - 1.0;
            out.jacobian[(0, 0)] = 1.0;
            out.jacobian[(0, 1)] = 1.0;
        }
    }

    #[test]
    fn linear_constraint_projection() {
        let r = minimize_al(&Disk, &[0.0, 0.0], &[0.0, 0.0], &[3.0, 3.0], &AlOptions::default());
        assert!(r.converged);
        // KKT point: (1, 0)
        assert!((r.x[0] - 1.0).abs() < 1e-6 && r.x[1].abs() < 1e-6, "{:?}", r.x);
        assert!(r.max_violation <= 1e-7);
    }

    /// Rosenbrock in a box with an inactive nonlinear constraint.
    struct Rosen;

    impl ConstrainedProblem for Rosen {
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
            out.constraints[0] = a * a + b * b - 4.0;
            out.jacobian[(0, 0)] = 2.0 * a;
            out.jacobian[(0, 1)] = 2.0 * b;
        }
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let r = minimize_al(&Rosen, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &AlOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        // Upper bound at 0.5 makes the bound active.
        let r = minimize_al(&Rosen, &[-1.2, 0.0], &[-2.0, -2.0], &[0.5, 2.0], &AlOptions::default());
        assert!((r.x[0] - 0.5).abs() < 1e-9 && (r.x[1] - 0.25).abs() < 1e-5, "{:?}", r.x);
    }

    struct Infeasible;

    impl ConstrainedProblem for Infeasible {
        fn dim(&self) -> usize {
            1
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64], out: &mut Evaluation) {
            out.objective = x[0] * x[0];
            out.gradient[0] = 2.0 * x[0];
            out.constraints[0] = 2.0 - x[0];
            out.jacobian[(0, 0)] = -1.0;
        }
    }

    #[test]
    fn infeasible_problem_is_reported() {
        let r = minimize_al(&Infeasible, &[0.0], &[0.0], &[1.0], &AlOptions::default());
        assert!(!r.converged);
        assert!((r.max_violation - 1.0).abs() < 1e-9);
        assert_eq!(r.x, vec![1.0]);
    }
}
