//! Condensed multi-step predictors and their confidence boxes.
//!
//! Step `t` of the bank maps the feature `(x₀, u₀, …, u_{t−1})` (length `n_x + t·n_u`, always in
//! that order) directly to the predicted state `x_t`, one KRR model per state dimension. The
//! confidence box of step `t` is centered at that prediction with half-widths given by the
//! per-dimension error bounds.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::kernels::KernelSpec;
use crate::regression::{Dataset, FitOptions, GammaPolicy, GramFactors, KrrModel};

/// Axis-aligned hyper-rectangle `{x | lower ≤ x ≤ upper}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(KpcError::dim("box bounds", lower.len(), upper.len()));
        }
        Ok(StateBox { lower, upper })
    }

    pub fn centered(center: &[f64], half_widths: &[f64]) -> Self {
        StateBox {
            lower: center.iter().zip(half_widths).map(|(c, h)| c - h).collect(),
            upper: center.iter().zip(half_widths).map(|(c, h)| c + h).collect(),
        }
    }

    pub fn point(p: &[f64]) -> Self {
        StateBox {
            lower: p.to_vec(),
            upper: p.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// First dimension with `lower > upper`, if any.
    pub fn empty_dim(&self) -> Option<usize> {
        self.lower.iter().zip(&self.upper).position(|(l, u)| l > u)
    }

    pub fn is_empty(&self) -> bool {
        self.empty_dim().is_some()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    /// Corners of the box, `2^dim` of them.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|j| if mask >> j & 1 == 1 { self.upper[j] } else { self.lower[j] })
                    .collect()
            })
            .collect()
    }
}

/// Kernel, regularization and Γ policy for one model of the bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spec: KernelSpec,
    pub lambda: f64,
    pub gamma: GammaPolicy,
    #[serde(default)]
    pub fit: FitOptions,
}

/// Smoothed center and half-widths of one step with Jacobians w.r.t. the full feature.
#[derive(Clone, Debug)]
pub struct StepEval {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
    /// n_x × feature_dim
    pub center_jac: DMatrix<f64>,
    pub half_jac: DMatrix<f64>,
}

impl StepEval {
    pub fn to_box(&self) -> StateBox {
        StateBox::centered(&self.center, &self.half_widths)
    }
}

/// Jacobians of a confidence box with respect to the input sequence only.
#[derive(Clone, Debug)]
pub struct BoxGradients {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
    /// n_x × (t·n_u)
    pub center_jac: DMatrix<f64>,
    pub half_jac: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelBank {
    n_x: usize,
    n_u: usize,
    /// steps[t − 1][dim]
    steps: Vec<Vec<KrrModel>>,
}

impl ModelBank {
    /// Fits every model of the bank. `datasets[t−1][dim]` and `configs[t−1][dim]`.
    ///
    /// Models of one step that share features, kernel and λ also share their Gram
    /// factorizations. Fits run on one thread per model.
    pub fn build(n_x: usize, n_u: usize, datasets: &[Vec<Dataset>], configs: &[Vec<ModelConfig>]) -> Result<Self> {
        if datasets.is_empty() {
            return Err(KpcError::InvalidArgument("bank needs at least one step".into()));
        }
        if configs.len() != datasets.len() {
            return Err(KpcError::dim("bank model configs", datasets.len(), configs.len()));
        }
        for (i, (ds, cf)) in datasets.iter().zip(configs).enumerate() {
            let t = i + 1;
            if ds.len() != n_x {
                return Err(KpcError::dim("bank datasets per step", n_x, ds.len()));
            }
            if cf.len() != n_x {
                return Err(KpcError::dim("bank configs per step", n_x, cf.len()));
            }
            for (dim, (d, c)) in ds.iter().zip(cf).enumerate() {
                let expected = n_x + t * n_u;
                if d.dim() != expected || c.spec.dim() != expected {
                    return Err(KpcError::Fit {
                        step: t,
                        dim,
                        source: Box::new(KpcError::dim("feature dimension", expected, d.dim().max(c.spec.dim()))),
                    });
                }
            }
        }

        let annotate = |t: usize, dim: usize| move |e: KpcError| KpcError::Fit { step: t, dim, source: Box::new(e) };

        // Shared factorizations, one per distinct (features, spec, λ) within a step.
        let mut factor_index: Vec<Vec<usize>> = Vec::with_capacity(datasets.len());
        let mut factor_jobs: Vec<(usize, usize)> = Vec::new();
        for (i, (ds, cf)) in datasets.iter().zip(configs).enumerate() {
            let mut idx = Vec::with_capacity(n_x);
            for dim in 0..n_x {
                let found = factor_jobs.iter().position(|&(ti, di)| {
                    ti == i
                        && datasets[ti][di].features == ds[dim].features
                        && configs[ti][di].spec == cf[dim].spec
                        && configs[ti][di].lambda == cf[dim].lambda
                });
                idx.push(found.unwrap_or_else(|| {
                    factor_jobs.push((i, dim));
                    factor_jobs.len() - 1
                }));
            }
            factor_index.push(idx);
        }
        let factors: Vec<Arc<GramFactors>> = std::thread::scope(|s| {
            let handles: Vec<_> = factor_jobs
                .iter()
                .map(|&(i, dim)| {
                    s.spawn(move || {
                        GramFactors::new(&configs[i][dim].spec, configs[i][dim].lambda, &datasets[i][dim].features)
                            .map(Arc::new)
                            .map_err(annotate(i + 1, dim))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("factorization thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?;

        let steps = std::thread::scope(|s| {
            let handles: Vec<Vec<_>> = (0..datasets.len())
                .map(|i| {
                    (0..n_x)
                        .map(|dim| {
                            let f = Arc::clone(&factors[factor_index[i][dim]]);
                            let ds = &datasets[i][dim];
                            let cf = &configs[i][dim];
                            s.spawn(move || {
                                KrrModel::fit_on_factors(f, ds, cf.gamma, &cf.fit).map_err(annotate(i + 1, dim))
                            })
                        })
                        .collect()
                })
                .collect();
            handles
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|h| h.join().expect("fit thread panicked"))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(ModelBank { n_x, n_u, steps })
    }

    /// Assembles a bank from already fitted models, `steps[t−1][dim]`.
    pub fn from_models(n_x: usize, n_u: usize, steps: Vec<Vec<KrrModel>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(KpcError::InvalidArgument("bank needs at least one step".into()));
        }
        for (i, row) in steps.iter().enumerate() {
            if row.len() != n_x {
                return Err(KpcError::dim("bank models per step", n_x, row.len()));
            }
            let expected = n_x + (i + 1) * n_u;
            if let Some(m) = row.iter().find(|m| m.dim() != expected) {
                return Err(KpcError::dim("bank model feature dimension", expected, m.dim()));
            }
        }
        Ok(ModelBank { n_x, n_u, steps })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Model of step `t` (1-based) and state dimension `dim`.
    pub fn model(&self, t: usize, dim: usize) -> &KrrModel {
        &self.steps[t - 1][dim]
    }

    pub fn step_models(&self, t: usize) -> &[KrrModel] {
        &self.steps[t - 1]
    }

    pub fn feature_dim(&self, t: usize) -> usize {
        self.n_x + t * self.n_u
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon() {
            return Err(KpcError::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Feature `(x₀, u₀, …, u_{t−1})` with `u_seq` flattened.
    pub fn feature(&self, t: usize, x0: &[f64], u_seq: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if x0.len() != self.n_x {
            return Err(KpcError::dim("initial state", self.n_x, x0.len()));
        }
        if u_seq.len() != t * self.n_u {
            return Err(KpcError::dim("input sequence", t * self.n_u, u_seq.len()));
        }
        let mut z = Vec::with_capacity(self.feature_dim(t));
        z.extend_from_slice(x0);
        z.extend_from_slice(u_seq);
        Ok(z)
    }

    fn check_feature(&self, t: usize, z: &[f64]) -> Result<()> {
        self.check_step(t)?;
        if z.len() != self.feature_dim(t) {
            return Err(KpcError::dim("step feature", self.feature_dim(t), z.len()));
        }
        Ok(())
    }

    /// F_t(x₀, u₀, …, u_{t−1}).
    pub fn nominal_predict(&self, t: usize, x0: &[f64], u_seq: &[f64]) -> Result<Vec<f64>> {
        let z = self.feature(t, x0, u_seq)?;
        Ok(self.steps[t - 1].iter().map(|m| m.predict_unchecked(&z)).collect())
    }

    pub fn confidence_box(&self, t: usize, x0: &[f64], u_seq: &[f64]) -> Result<StateBox> {
        let z = self.feature(t, x0, u_seq)?;
        self.box_at_feature(t, &z)
    }

    /// Exact confidence box of step `t` at a full feature vector.
    pub fn box_at_feature(&self, t: usize, z: &[f64]) -> Result<StateBox> {
        self.check_feature(t, z)?;
        let models = &self.steps[t - 1];
        let center: Vec<f64> = models.iter().map(|m| m.predict_unchecked(z)).collect();
        let half: Vec<f64> = models.iter().map(|m| m.bound_terms_unchecked(z).total()).collect();
        Ok(StateBox::centered(&center, &half))
    }

    /// Smoothed box of step `t` at a full feature vector with Jacobians w.r.t. that feature.
    pub fn eval_step_smoothed(&self, t: usize, z: &[f64], eps: f64) -> Result<StepEval> {
        self.check_feature(t, z)?;
        let p = z.len();
        let mut out = StepEval {
            center: vec![0.0; self.n_x],
            half_widths: vec![0.0; self.n_x],
            center_jac: DMatrix::zeros(self.n_x, p),
            half_jac: DMatrix::zeros(self.n_x, p),
        };
        for (dim, m) in self.steps[t - 1].iter().enumerate() {
            let e = m.eval_smoothed_unchecked(z, eps);
            out.center[dim] = e.mean;
            out.half_widths[dim] = e.bound;
            out.center_jac.row_mut(dim).copy_from(&e.mean_grad.transpose());
            out.half_jac.row_mut(dim).copy_from(&e.bound_grad.transpose());
        }
        Ok(out)
    }

    /// Smoothed box of step `t` and its Jacobians with respect to `u_seq`.
    pub fn confidence_box_gradients(&self, t: usize, x0: &[f64], u_seq: &[f64], eps: f64) -> Result<BoxGradients> {
        let z = self.feature(t, x0, u_seq)?;
        let e = self.eval_step_smoothed(t, &z, eps)?;
        let m = t * self.n_u;
        Ok(BoxGradients {
            center: e.center,
            half_widths: e.half_widths,
            center_jac: e.center_jac.columns(self.n_x, m).into_owned(),
            half_jac: e.half_jac.columns(self.n_x, m).into_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_bank(rng: &mut ChaCha8Rng, n_x: usize, n_u: usize, horizon: usize, d: usize, noise: f64) -> ModelBank {
        let mut datasets = Vec::new();
        let mut configs = Vec::new();
        for t in 1..=horizon {
            let p = n_x + t * n_u;
            let feats: Vec<Vec<f64>> = (0..d).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut row = Vec::new();
            let mut crow = Vec::new();
            for dim in 0..n_x {
                let y = feats
                    .iter()
                    .map(|z| (z[dim] + 0.3 * z.iter().sum::<f64>()).sin() + rng.gen_range(-noise..=noise))
                    .collect();
                row.push(Dataset::with_uniform_noise(feats.clone(), y, noise).unwrap());
                crow.push(ModelConfig {
                    spec: KernelSpec::squared_exponential(1.0, vec![0.8; p]),
                    lambda: 1e-5,
                    gamma: GammaPolicy::Augment(2.5),
                    fit: FitOptions::default(),
                });
            }
            datasets.push(row);
            configs.push(crow);
        }
        ModelBank::build(n_x, n_u, &datasets, &configs).unwrap()
    }

    #[test]
    fn single_model_bank_matches_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = toy_bank(&mut rng, 1, 1, 1, 20, 0.01);
        let ds = bank.model(1, 0).dataset();
        let refit = KrrModel::fit(&ds, bank.model(1, 0).spec(), 1e-5, GammaPolicy::Augment(2.5)).unwrap();
        for _ in 0..10 {
            let x = [rng.gen_range(-1.0..1.0)];
            let u = [rng.gen_range(-1.0..1.0)];
            let pred = bank.nominal_predict(1, &x, &u).unwrap();
            assert!((pred[0] - refit.predict(&[x[0], u[0]]).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn models_share_factorizations_within_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = toy_bank(&mut rng, 2, 1, 2, 15, 0.01);
        for t in 1..=2 {
            assert!(Arc::ptr_eq(bank.model(t, 0).factors(), bank.model(t, 1).factors()));
            assert_eq!(bank.model(t, 0).dim(), 2 + t);
        }
    }

    #[test]
    fn box_contains_center_and_has_positive_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = toy_bank(&mut rng, 2, 1, 3, 25, 0.01);
        for t in 1..=3 {
            let x = [0.2, -0.4];
            let u: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = bank.confidence_box(t, &x, &u).unwrap();
            let c = bank.nominal_predict(t, &x, &u).unwrap();
            assert!(b.contains(&c));
            assert!(b.half_widths().iter().all(|h| *h > 0.0));
        }
    }

    #[test]
    fn zero_weight_bank_has_zero_center_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f64>> = (0..10).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ds = Dataset::with_uniform_noise(feats, vec![0.0; 10], 0.0).unwrap();
        let cfg = ModelConfig {
            spec: KernelSpec::squared_exponential(1.0, vec![1.0, 1.0]),
            lambda: 1e-4,
            gamma: GammaPolicy::Fixed(1.0),
            fit: FitOptions::default(),
        };
        let bank = ModelBank::build(1, 1, &[vec![ds]], &[vec![cfg]]).unwrap();
        assert_eq!(bank.nominal_predict(1, &[0.3], &[0.1]).unwrap(), vec![0.0]);
        let g = bank.confidence_box_gradients(1, &[0.3], &[0.1], 1e-12).unwrap();
        assert!(g.center_jac.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = toy_bank(&mut rng, 2, 1, 3, 30, 0.01);
        let eps = 1e-12;
        for t in 1..=3 {
            for _ in 0..5 {
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let u: Vec<f64> = (0..t).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g = bank.confidence_box_gradients(t, &x, &u, eps).unwrap();
                let h = 1e-6;
                for j in 0..t {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[j] += h;
                    um[j] -= h;
                    let gp = bank.confidence_box_gradients(t, &x, &up, eps).unwrap();
                    let gm = bank.confidence_box_gradients(t, &x, &um, eps).unwrap();
                    for d in 0..2 {
                        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                        let fd_c = (gp.center[d] - gm.center[d]) / (2.0 * h);
                        let fd_h = (gp.half_widths[d] - gm.half_widths[d]) / (2.0 * h);
                        assert!(rel(g.center_jac[(d, j)], fd_c) <= 1e-4);
                        assert!(rel(g.half_jac[(d, j)], fd_h) <= 1e-4, "t={t} d={d} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn far_from_data_power_term_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = toy_bank(&mut rng, 1, 1, 1, 10, 0.0);
        let g = bank.confidence_box_gradients(1, &[50.0], &[50.0], 1e-12).unwrap();
        assert!(g.half_jac.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = toy_bank(&mut rng, 2, 1, 2, 10, 0.01);
        assert!(bank.nominal_predict(3, &[0.0, 0.0], &[0.0; 3]).is_err());
        assert!(bank.nominal_predict(1, &[0.0], &[0.0]).is_err());
        assert!(bank.confidence_box(2, &[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn box_corners() {
        let b = StateBox::new(vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
        let c = b.corners();
        assert_eq!(c.len(), 4);
        assert!(c.contains(&vec![2.0, 1.0]));
        assert!(!StateBox::new(vec![1.0], vec![0.0]).unwrap().empty_dim().is_none());
    }
}
