//! Monte Carlo checks of the error bounds against ground truths that lie in the kernel's RKHS
//! with exactly known norm.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::kernels::{eval_kernel, gram_matrix, KernelSpec};
use crate::model_bank::{ModelBank, ModelConfig};
use crate::plants::sample_bounded_noise;
use crate::regression::{Dataset, FitOptions, GammaPolicy, KrrModel};

/// `f = Σ cᵢ k(ζᵢ, ·)`, whose RKHS norm is `√(cᵀK_ζ c)`.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    spec: KernelSpec,
    centers: Vec<Vec<f64>>,
    coeffs: DVector<f64>,
    norm: f64,
}

impl SyntheticTruth {
    pub fn new(spec: KernelSpec, centers: Vec<Vec<f64>>, coeffs: Vec<f64>) -> Result<Self> {
        if centers.len() != coeffs.len() {
            return Err(KpcError::dim("truth coefficients", centers.len(), coeffs.len()));
        }
        let coeffs = DVector::from_vec(coeffs);
        let k = gram_matrix(&spec, &centers, false)?;
        let norm = coeffs.dot(&(&k * &coeffs)).max(0.0).sqrt();
        Ok(SyntheticTruth {
            spec,
            centers,
            coeffs,
            norm,
        })
    }

    /// Centers uniform over `[lower, upper]`, coefficients uniform in [−1, 1].
    pub fn random<R: Rng>(spec: KernelSpec, n_centers: usize, lower: &[f64], upper: &[f64], rng: &mut R) -> Result<Self> {
        let centers = (0..n_centers).map(|_| uniform_point(lower, upper, rng)).collect();
        let coeffs = (0..n_centers).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self::new(spec, centers, coeffs)
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (c, zeta) in self.coeffs.iter().zip(&self.centers) {
            s += c * eval_kernel(&self.spec, zeta, z)?;
        }
        Ok(s)
    }

    pub fn rkhs_norm(&self) -> f64 {
        self.norm
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }
}

pub fn uniform_point<R: Rng>(lower: &[f64], upper: &[f64], rng: &mut R) -> Vec<f64> {
    lower.iter().zip(upper).map(|(l, h)| rng.gen_range(*l..=*h)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckOptions {
    pub dim: usize,
    pub samples: usize,
    pub trials: usize,
    pub centers: usize,
    pub noise_bound: f64,
    pub lambda: f64,
    pub lengthscale: f64,
    /// Tolerance added to β before counting a violation.
    pub slack: f64,
    pub seed: u64,
}

impl Default for BoundCheckOptions {
    fn default() -> Self {
        BoundCheckOptions {
            dim: 2,
            samples: 40,
            trials: 10_000,
            centers: 20,
            noise_bound: 0.01,
            lambda: 1e-4,
            lengthscale: 0.5,
            slack: 1e-9,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub violations: usize,
    pub gamma: f64,
    pub max_beta: f64,
    pub mean_beta: f64,
    pub max_abs_error: f64,
    /// Smallest β(z) − |f̂(z) − f(z)| over all trials.
    pub min_margin: f64,
}

/// Fits one model to noisy samples of a random in-RKHS truth with Γ = ‖f‖ and checks
/// `|f̂(z) − f(z)| ≤ β(z)` at uniform test points over [−1, 1]^dim.
pub fn verify_bounds(opts: &BoundCheckOptions) -> Result<BoundReport> {
    if opts.dim == 0 || opts.samples == 0 || opts.centers == 0 {
        return Err(KpcError::InvalidArgument("dim, samples and centers must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lower = vec![-1.0; opts.dim];
    let upper = vec![1.0; opts.dim];
    let spec = KernelSpec::squared_exponential(1.0, vec![opts.lengthscale; opts.dim]);
    let truth = SyntheticTruth::random(spec.clone(), opts.centers, &lower, &upper, &mut rng)?;
    let features: Vec<Vec<f64>> = (0..opts.samples).map(|_| uniform_point(&lower, &upper, &mut rng)).collect();
    let targets = features
        .iter()
        .map(|z| Ok(truth.eval(z)? + sample_bounded_noise(&[opts.noise_bound], &mut rng)[0]))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::with_uniform_noise(features, targets, opts.noise_bound)?;
    let model = KrrModel::fit(&ds, &spec, opts.lambda, GammaPolicy::Fixed(truth.rkhs_norm()))?;

    let mut report = BoundReport {
        trials: opts.trials,
        violations: 0,
        gamma: model.gamma(),
        max_beta: 0.0,
        mean_beta: 0.0,
        max_abs_error: 0.0,
        min_margin: f64::INFINITY,
    };
    for _ in 0..opts.trials {
        let z = uniform_point(&lower, &upper, &mut rng);
        let err = (model.predict(&z)? - truth.eval(&z)?).abs();
        let beta = model.error_bound(&z)?;
        if err > beta + opts.slack {
            report.violations += 1;
        }
        report.max_beta = report.max_beta.max(beta);
        report.mean_beta += beta / opts.trials.max(1) as f64;
        report.max_abs_error = report.max_abs_error.max(err);
        report.min_margin = report.min_margin.min(beta - err);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentOptions {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub samples: usize,
    pub trials: usize,
    pub centers: usize,
    pub noise_bound: f64,
    pub lambda: f64,
    /// Lengthscale of every feature coordinate at step 1, grown by √t for step t.
    pub lengthscale: f64,
    pub slack: f64,
    pub seed: u64,
}

impl Default for ContainmentOptions {
    fn default() -> Self {
        ContainmentOptions {
            n_x: 2,
            n_u: 1,
            horizon: 3,
            samples: 60,
            trials: 10_000,
            centers: 20,
            noise_bound: 0.01,
            lambda: 1e-4,
            lengthscale: 0.7,
            slack: 1e-9,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub trials: usize,
    /// Trials whose true t-step successor left the step-t box, per step.
    pub violations_per_step: Vec<usize>,
    pub mean_half_width_per_step: Vec<f64>,
}

impl ContainmentReport {
    pub fn violations(&self) -> usize {
        self.violations_per_step.iter().sum()
    }
}

/// A synthetic system whose t-step successor map is, per state dimension, an in-RKHS truth on
/// the condensed feature `(x₀, u₀, …, u_{t−1})`. Builds a bank with Γ = ‖f_{t,j}‖ and checks that
/// every true successor lies in its confidence box.
pub fn verify_containment(opts: &ContainmentOptions) -> Result<ContainmentReport> {
    if opts.n_x == 0 || opts.n_u == 0 || opts.horizon == 0 || opts.samples == 0 {
        return Err(KpcError::InvalidArgument("sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut truths: Vec<Vec<SyntheticTruth>> = Vec::new();
    let mut datasets: Vec<Vec<Dataset>> = Vec::new();
    let mut configs: Vec<Vec<ModelConfig>> = Vec::new();
    for t in 1..=opts.horizon {
        let p = opts.n_x + t * opts.n_u;
        let (lower, upper) = (vec![-1.0; p], vec![1.0; p]);
        let spec = KernelSpec::squared_exponential(1.0, vec![opts.lengthscale * (t as f64).sqrt(); p]);
        let features: Vec<Vec<f64>> = (0..opts.samples).map(|_| uniform_point(&lower, &upper, &mut rng)).collect();
        let mut row_truths = Vec::new();
        let mut row_data = Vec::new();
        let mut row_cfg = Vec::new();
        for _ in 0..opts.n_x {
            let truth = SyntheticTruth::random(spec.clone(), opts.centers, &lower, &upper, &mut rng)?;
            let targets = features
                .iter()
                .map(|z| Ok(truth.eval(z)? + sample_bounded_noise(&[opts.noise_bound], &mut rng)[0]))
                .collect::<Result<Vec<_>>>()?;
            row_data.push(Dataset::with_uniform_noise(features.clone(), targets, opts.noise_bound)?);
            row_cfg.push(ModelConfig {
                spec: spec.clone(),
                lambda: opts.lambda,
                gamma: GammaPolicy::Fixed(truth.rkhs_norm()),
                fit: FitOptions::default(),
            });
            row_truths.push(truth);
        }
        truths.push(row_truths);
        datasets.push(row_data);
        configs.push(row_cfg);
    }
    let bank = ModelBank::build(opts.n_x, opts.n_u, &datasets, &configs)?;

    let mut report = ContainmentReport {
        trials: opts.trials,
        violations_per_step: vec![0; opts.horizon],
        mean_half_width_per_step: vec![0.0; opts.horizon],
    };
    let (xl, xh) = (vec![-1.0; opts.n_x], vec![1.0; opts.n_x]);
    let (ul, uh) = (vec![-1.0; opts.n_u * opts.horizon], vec![1.0; opts.n_u * opts.horizon]);
    for _ in 0..opts.trials {
        let x0 = uniform_point(&xl, &xh, &mut rng);
        let u = uniform_point(&ul, &uh, &mut rng);
        for t in 1..=opts.horizon {
            let u_seq = &u[..t * opts.n_u];
            let b = bank.confidence_box(t, &x0, u_seq)?;
            let z = bank.feature(t, &x0, u_seq)?;
            let truth = truths[t - 1].iter().map(|f| f.eval(&z)).collect::<Result<Vec<_>>>()?;
            if !b.contains_with_tol(&truth, opts.slack) {
                report.violations_per_step[t - 1] += 1;
            }
            let hw: f64 = b.half_widths().iter().sum::<f64>() / opts.n_x as f64;
            report.mean_half_width_per_step[t - 1] += hw / opts.trials.max(1) as f64;
        }
    }
    Ok(report)
}
