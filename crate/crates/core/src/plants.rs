//! Ground-truth plants: a two-state CSTR and a pendulum, integrated with fixed-step RK4 under a
//! zero-order-hold input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CstrParams {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub c_a0: f64,
    /// Multiplies ρ₁, ρ₂, ρ₃ inside the right-hand side.
    pub rate_scale: f64,
    /// Converts the sampling period into the ODE's time unit.
    pub time_scale: f64,
    pub sample_period: f64,
    pub rk4_substeps: usize,
}

impl Default for CstrParams {
    /// Rate constants read as per-second values, integrated in hours with the input in h⁻¹.
    fn default() -> Self {
        CstrParams {
            rho1: 4.1e-3,
            rho2: 4.1e-3,
            rho3: 6.3e-4,
            c_a0: 5.1,
            rate_scale: 3600.0,
            time_scale: 1.0 / 3600.0,
            sample_period: 30.0,
            rk4_substeps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub friction: f64,
    pub sample_period: f64,
    pub rk4_substeps: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 0.15,
            length: 0.5,
            gravity: 9.81,
            friction: 0.1,
            sample_period: 0.2,
            rk4_substeps: 10,
        }
    }
}

/// (ċ_A, ċ_B) for concentrations x = (c_A, c_B) and feed inflow u.
pub fn cstr_rhs(x: &[f64], u: f64, p: &CstrParams) -> [f64; 2] {
    let (ca, cb) = (x[0], x[1]);
    let (r1, r2, r3) = (p.rho1 * p.rate_scale, p.rho2 * p.rate_scale, p.rho3 * p.rate_scale);
    [
        u * (p.c_a0 - ca) - r1 * ca - r3 * ca * ca,
        -u * cb + r1 * ca - r2 * cb * cb,
    ]
}

/// (ẋ₁, ẋ₂) for angle x₁ (0 = upright), angular velocity x₂ and torque u.
pub fn pendulum_rhs(x: &[f64], u: f64, p: &PendulumParams) -> [f64; 2] {
    let ml2 = p.mass * p.length * p.length;
    [
        x[1],
        p.gravity / p.length * x[0].sin() - p.friction / ml2 * x[1] + u / ml2,
    ]
}

/// Classical RK4 over `dt` split into `substeps` equal steps, input held constant.
pub fn rk4_step<F>(rhs: F, x: &[f64], u: &[f64], dt: f64, substeps: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    if !(dt > 0.0 && dt.is_finite()) || substeps == 0 {
        return Err(KpcError::InvalidArgument(format!("rk4 needs dt > 0 and substeps ≥ 1 (got {dt}, {substeps})")));
    }
    let h = dt / substeps as f64;
    let n = x.len();
    let mut state = x.to_vec();
    let mut tmp = vec![0.0; n];
    for _ in 0..substeps {
        let k1 = rhs(&state, u);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        let k2 = rhs(&tmp, u);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        let k3 = rhs(&tmp, u);
        for i in 0..n {
            tmp[i] = state[i] + h * k3[i];
        }
        let k4 = rhs(&tmp, u);
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(KpcError::Divergence(format!("non-finite state from {x:?} under input {u:?}")));
        }
    }
    Ok(state)
}

/// Uniform draw on `[−bound_j, bound_j]` per component.
pub fn sample_bounded_noise<R: Rng + ?Sized>(bound: &[f64], rng: &mut R) -> Vec<f64> {
    bound
        .iter()
        .map(|b| if *b > 0.0 { rng.gen_range(-*b..=*b) } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    Cstr(CstrParams),
    Pendulum(PendulumParams),
}

impl Plant {
    pub fn n_x(&self) -> usize {
        2
    }

    pub fn n_u(&self) -> usize {
        1
    }

    pub fn name(&self) -> &'static str {
        match self {
            Plant::Cstr(_) => "cstr",
            Plant::Pendulum(_) => "pendulum",
        }
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            Plant::Cstr(p) => cstr_rhs(x, u[0], p).to_vec(),
            Plant::Pendulum(p) => pendulum_rhs(x, u[0], p).to_vec(),
        }
    }

    /// Sampling period expressed in the ODE's time unit.
    pub fn step_length(&self) -> f64 {
        match self {
            Plant::Cstr(p) => p.sample_period * p.time_scale,
            Plant::Pendulum(p) => p.sample_period,
        }
    }

    pub fn substeps(&self) -> usize {
        match self {
            Plant::Cstr(p) => p.rk4_substeps,
            Plant::Pendulum(p) => p.rk4_substeps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Plant::Cstr(p) => [p.rho1, p.rho2, p.rho3, p.c_a0, p.rate_scale, p.time_scale, p.sample_period]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0),
            Plant::Pendulum(p) => [p.mass, p.length, p.gravity, p.friction, p.sample_period]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0),
        };
        if !ok || self.substeps() == 0 {
            return Err(KpcError::Config(format!("{} parameters must be positive", self.name())));
        }
        Ok(())
    }

    /// One sampling period of the true plant.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        rk4_step(|s, v| self.rhs(s, v), x, u, self.step_length(), self.substeps())
    }

    /// State after applying `inputs` (flattened, n_u per step) from `x0`.
    pub fn rollout(&self, x0: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
        let mut x = x0.to_vec();
        for u in inputs.chunks(self.n_u()) {
            x = self.step(&x, u)?;
        }
        Ok(x)
    }
}

/// Result of refining an equilibrium guess.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// ‖rhs(state, input)‖∞ at the refined point.
    pub residual: f64,
    /// ‖rhs(guess, input)‖∞ at the supplied guess.
    pub guess_residual: f64,
    pub converged: bool,
}

/// Damped Newton on `rhs(x, u) = 0` for x with u fixed, Jacobian by central differences.
pub fn equilibrium_solve<F>(rhs: F, x_guess: &[f64], u: &[f64]) -> Equilibrium
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let n = x_guess.len();
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut x = x_guess.to_vec();
    let mut f = rhs(&x, u);
    let guess_residual = norm(&f);
    let mut res = guess_residual;
    let mut converged = res <= 1e-12;
    for _ in 0..100 {
        if converged {
            break;
        }
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (rhs(&xp, u), rhs(&xm, u));
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rhs_vec = nalgebra::DVector::from_iterator(n, f.iter().map(|v| -v));
        let Some(step) = jac.lu().solve(&rhs_vec) else { break };
        let mut tau = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + tau * s).collect();
            let ft = rhs(&trial, u);
            let rt = norm(&ft);
            if rt.is_finite() && rt < res {
                x = trial;
                f = ft;
                res = rt;
                improved = true;
                break;
            }
            tau *= 0.5;
        }
        if !improved {
            break;
        }
        converged = res <= 1e-12 * (1.0 + norm(&x));
    }
    Equilibrium {
        state: x,
        input: u.to_vec(),
        residual: res,
        guess_residual,
        converged: converged || res <= 1e-9,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn cstr_formula_points() {
        let p = CstrParams::default();
        let r1 = p.rho1 * p.rate_scale;
        let r3 = p.rho3 * p.rate_scale;
        for u in [3.0, 14.19, 35.0] {
            let d = cstr_rhs(&[p.c_a0, 0.0], u, &p);
            assert!((d[0] - (-r1 * p.c_a0 - r3 * p.c_a0 * p.c_a0)).abs() < 1e-12);
        }
        assert_eq!(cstr_rhs(&[0.0, 0.0], 0.0, &p), [0.0, 0.0]);
    }

    #[test]
    fn pendulum_formula_points() {
        let p = PendulumParams::default();
        assert_eq!(pendulum_rhs(&[0.0, 0.0], 0.0, &p), [0.0, 0.0]);
        let d = pendulum_rhs(&[FRAC_PI_2, 0.0], 0.0, &p);
        assert!(d[0] == 0.0 && (d[1] - 19.62).abs() < 1e-12);
        let d = pendulum_rhs(&[0.0, 1.0], 0.0, &p);
        assert!(d[0] == 1.0 && (d[1] + 0.1 / (0.15 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rhs_match_independent_derivation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = CstrParams::default();
        let pd = PendulumParams::default();
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..4.0), rng.gen_range(0.0..3.0)];
            let u: f64 = rng.gen_range(0.0..40.0);
            // Expanded form: u·c_A0 − (u + k₁)c_A − k₃c_A²
            let k = 3600.0;
            let ea = u * 5.1 - (u + 4.1e-3 * k) * x[0] - 6.3e-4 * k * x[0].powi(2);
            let eb = 4.1e-3 * k * x[0] - u * x[1] - 4.1e-3 * k * x[1].powi(2);
            let d = cstr_rhs(&x, u, &c);
            assert!((d[0] - ea).abs() <= 1e-12 * (1.0 + ea.abs()) && (d[1] - eb).abs() <= 1e-12 * (1.0 + eb.abs()));

            let th: f64 = rng.gen_range(-PI..PI);
            let w: f64 = rng.gen_range(-5.0..5.0);
            let tq: f64 = rng.gen_range(-1.0..1.0);
            let inertia = 0.15 * 0.5 * 0.5;
            let acc = (9.81 * 0.15 * 0.5 * th.sin() - 0.1 * w + tq) / inertia;
            let d = pendulum_rhs(&[th, w], tq, &pd);
            assert!(d[0] == w && (d[1] - acc).abs() <= 1e-12 * (1.0 + acc.abs()));
        }
    }

    #[test]
    fn rk4_exponential_decay() {
        let x = rk4_step(|s, _| vec![-s[0]], &[1.0], &[], 0.1, 1).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
        let y = rk4_step(|_, _| vec![0.0, 0.0], &[1.5, -2.0], &[], 0.3, 4).unwrap();
        assert_eq!(y, vec![1.5, -2.0]);
    }

    #[test]
    fn rk4_observed_order_is_four() {
        // Global error at T = 1 for ẋ = −x with n and 2n steps.
        let err = |n: usize| (rk4_step(|s, _| vec![-s[0]], &[1.0], &[], 1.0, n).unwrap()[0] - (-1.0f64).exp()).abs();
        let order = (err(8) / err(16)).log2();
        assert!((3.9..=4.1).contains(&order), "observed order {order}");
    }

    #[test]
    fn rk4_rejects_bad_arguments_and_divergence() {
        assert!(rk4_step(|s, _| vec![s[0]], &[1.0], &[], 0.0, 1).is_err());
        assert!(rk4_step(|s, _| vec![s[0]], &[1.0], &[], 0.1, 0).is_err());
        let blow = rk4_step(|s, _| vec![s[0] * s[0] * 1e200], &[1e100], &[], 1.0, 2);
        assert!(matches!(blow, Err(KpcError::Divergence(_))));
    }

    #[test]
    fn pendulum_equilibria() {
        let p = PendulumParams::default();
        let rhs = |x: &[f64], u: &[f64]| pendulum_rhs(x, u[0], &p).to_vec();
        let up = equilibrium_solve(rhs, &[0.0, 0.0], &[0.0]);
        assert_eq!(up.state, vec![0.0, 0.0]);
        assert_eq!(up.residual, 0.0);
        let down = equilibrium_solve(rhs, &[3.0, 0.0], &[0.0]);
        assert!(down.converged);
        assert!((down.state[0] - PI).abs() < 1e-10 && down.state[1].abs() < 1e-10);
    }

    #[test]
    fn cstr_equilibrium_near_reported_point() {
        let p = CstrParams::default();
        let rhs = |x: &[f64], u: &[f64]| cstr_rhs(x, u[0], &p).to_vec();
        let eq = equilibrium_solve(rhs, &[2.14, 1.09], &[14.19]);
        assert!(eq.converged);
        assert!(eq.guess_residual > 0.1, "reported point is not an exact equilibrium");
        assert!((eq.state[0] - 2.14).abs() < 0.01);
        assert!((eq.state[1] - 1.09).abs() < 0.05);
    }

    #[test]
    fn noise_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(sample_bounded_noise(&[0.0, 0.0], &mut rng), vec![0.0, 0.0]);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_bounded_noise(&[0.01], &mut rng)[0]).collect();
        assert!(draws.iter().all(|d| d.abs() <= 0.01));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = 0.01 / 3f64.sqrt() / (draws.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se);
        let a: Vec<f64> = sample_bounded_noise(&[1.0; 5], &mut ChaCha8Rng::seed_from_u64(7));
        let b: Vec<f64> = sample_bounded_noise(&[1.0; 5], &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }
}
