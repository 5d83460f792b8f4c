//! Kernel ridge regression with deterministic finite-sample error bounds.
//!
//! A fitted [`KrrModel`] predicts `f̂(z) = K_zZ (K + DλI)⁻¹ y` and bounds the distance to any
//! ground truth `f` whose RKHS norm is at most Γ, given that every training target was perturbed
//! by at most `δ̄_d`:
//!
//! ```text
//! |f̂(z) − f(z)| ≤ P(z)·√(Γ² + Δ − yᵀK⁻¹y) + δ̄ᵀ|K⁻¹K_Zz| + |yᵀ(K + KK/(Dλ))⁻¹K_Zz|
//! ```
//!
//! Every `K⁻¹` above uses the jittered Gram matrix. `Δ` is the value of a concave box QP solved
//! once at fit time (see [`delta_constant`]).

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};
use crate::kernels::{self, KernelSpec};
use crate::smoothing::smooth_abs;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Noisy samples of one scalar output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub noise_bound: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, targets: Vec<f64>, noise_bound: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            features,
            targets,
            noise_bound,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Same noise bound on every sample.
    pub fn with_uniform_noise(features: Vec<Vec<f64>>, targets: Vec<f64>, bound: f64) -> Result<Self> {
        let n = targets.len();
        Dataset::new(features, targets, vec![bound; n])
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.targets.len();
        if d == 0 {
            return Err(KpcError::InvalidArgument("dataset is empty".into()));
        }
        if self.features.len() != d {
            return Err(KpcError::dim("dataset features", d, self.features.len()));
        }
        if self.noise_bound.len() != d {
            return Err(KpcError::dim("dataset noise bound", d, self.noise_bound.len()));
        }
        let p = self.dim();
        if let Some(row) = self.features.iter().find(|r| r.len() != p) {
            return Err(KpcError::dim("dataset feature row", p, row.len()));
        }
        if self.noise_bound.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(KpcError::InvalidArgument("noise bounds must be finite and nonnegative".into()));
        }
        if self.targets.iter().chain(self.features.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(KpcError::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(())
    }
}

/// How Γ, the assumed bound on the ground truth's RKHS norm, is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPolicy {
    /// Use the given value.
    Fixed(f64),
    /// Multiply the fitted model's own RKHS norm by this factor (≥ 1).
    Augment(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaQpOptions {
    pub max_iter: usize,
    /// Stop once ‖P(δ − ∇φ) − δ‖ ≤ rel_tol · (1 + ‖y‖).
    pub rel_tol: f64,
    /// Projected-gradient norm above which an exhausted iteration budget is an error.
    pub fail_tol: f64,
}

impl Default for DeltaQpOptions {
    fn default() -> Self {
        DeltaQpOptions {
            max_iter: 10_000,
            rel_tol: 1e-9,
            fail_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Replace the square-root factor of the bound by Γ and skip the Δ program.
    #[serde(default)]
    pub skip_delta_qp: bool,
    #[serde(default)]
    pub delta: DeltaQpOptions,
}

/// Factorizations shared by every model fitted on the same features, kernel and λ.
#[derive(Debug)]
pub struct GramFactors {
    spec: KernelSpec,
    lambda: f64,
    features: Vec<Vec<f64>>,
    gram: DMatrix<f64>,
    jitter: f64,
    chol_k: Cholesky<f64, Dyn>,
    chol_reg: Cholesky<f64, Dyn>,
}

impl GramFactors {
    pub fn new(spec: &KernelSpec, lambda: f64, features: &[Vec<f64>]) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(KpcError::InvalidArgument(format!("lambda {lambda} must be positive")));
        }
        let gram = kernels::gram_matrix(spec, features, false)?;
        let n = gram.nrows();
        let jitter = spec.jitter_rel * gram.diagonal().mean();
        let mut jittered = gram.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        let chol_k = Cholesky::new(jittered).ok_or(KpcError::IllConditionedGram)?;
        let mut reg = gram.clone();
        let shift = n as f64 * lambda;
        for i in 0..n {
            reg[(i, i)] += shift;
        }
        let chol_reg = Cholesky::new(reg).ok_or(KpcError::IllConditionedGram)?;
        Ok(GramFactors {
            spec: spec.clone(),
            lambda,
            features: features.to_vec(),
            gram,
            jitter,
            chol_k,
            chol_reg,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Unjittered Gram matrix.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Absolute diagonal jitter of the factorized Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Jittered Gram matrix times `v`.
    pub fn mul_k(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.gram * v + v * self.jitter
    }

    /// Solves with the jittered Gram matrix.
    pub fn solve_k(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol_k.solve(b)
    }

    /// L⁻¹b for the Cholesky factor L of the jittered Gram matrix, so ‖L⁻¹k‖² = kᵀK⁻¹k.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut w = b.clone();
        self.chol_k.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    }

    /// Power function squared, diag − ‖L⁻¹k‖², which loses far less to cancellation than kᵀK⁻¹k.
    fn power_sq(&self, k: &DVector<f64>) -> f64 {
        self.spec.diagonal() - self.whiten(k).norm_squared()
    }

    /// Solves with K + DλI.
    pub fn solve_reg(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol_reg.solve(b)
    }

    /// Condition number estimate of the jittered Gram matrix from its Cholesky diagonal.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.chol_k.l_dirty().diagonal();
        let max = l.iter().cloned().fold(f64::MIN, f64::max);
        let min = l.iter().cloned().fold(f64::MAX, f64::min);
        (max / min).powi(2)
    }
}

/// Outcome of the Δ program.
#[derive(Clone, Debug)]
pub struct DeltaSolution {
    /// Δ = max −δᵀK⁻¹δ + 2yᵀK⁻¹δ over |δ| ≤ δ̄.
    pub value: f64,
    /// (y − δ*)ᵀK⁻¹(y − δ*), the smallest interpolant norm² among noise-consistent targets.
    pub interp_norm_sq: f64,
    pub maximizer: DVector<f64>,
    pub iterations: usize,
    pub pg_norm: f64,
}

/// Solves the concave box QP behind Δ.
///
/// Works on the equivalent minimization of φ(δ) = (y − δ)ᵀK⁻¹(y − δ), since
/// q(δ) = yᵀK⁻¹y − φ(δ). A primal active-set pass finds which components sit on the box and
/// solves the reduced system exactly, carrying w = K⁻¹(y − δ) without forming K⁻¹ on the free
/// components. If the active set does not settle, spectral projected gradient (Barzilai–Borwein
/// length plus exact line minimization on [0, 1]) continues from the last iterate.
///
/// The returned φ never exceeds the dual value 2wᵀy − wᵀKw − 2δ̄ᵀ|w|, a lower bound on the true
/// minimum for any w, so round-off can only make Δ larger.
pub fn delta_constant(
    factors: &GramFactors,
    targets: &DVector<f64>,
    noise_bound: &DVector<f64>,
    opts: &DeltaQpOptions,
) -> Result<DeltaSolution> {
    let n = targets.len();
    if noise_bound.len() != n || factors.len() != n {
        return Err(KpcError::dim("delta QP", n, noise_bound.len()));
    }
    let clip = |v: &DVector<f64>| DVector::from_iterator(n, v.iter().zip(noise_bound.iter()).map(|(x, b)| x.clamp(-b, *b)));
    let kinv_y = factors.solve_k(targets);
    let y_kinv_y = targets.dot(&kinv_y);
    let tol = opts.rel_tol * (1.0 + targets.norm());
    // ∇q = 2w; the projected ascent step is clip(δ + 2w) − δ.
    let pg_of = |delta: &DVector<f64>, w: &DVector<f64>| (clip(&(delta + w * 2.0)) - delta).norm();

    if noise_bound.iter().all(|b| *b == 0.0) {
        return Ok(DeltaSolution {
            value: 0.0,
            interp_norm_sq: y_kinv_y.max(0.0),
            maximizer: DVector::zeros(n),
            iterations: 0,
            pg_norm: 0.0,
        });
    }

    let (mut delta, mut w, mut iterations, settled) = active_set(factors, targets, noise_bound, 100 + 10 * n);
    let mut pg_norm = if settled { pg_of(&delta, &w) } else { f64::INFINITY };

    if pg_norm > tol {
        delta = clip(&delta);
        w = factors.solve_k(&(targets - &delta));
        let mut step = 1.0;
        let mut spg_iter = 0;
        loop {
            pg_norm = pg_of(&delta, &w);
            if pg_norm <= tol || spg_iter >= opts.max_iter {
                break;
            }
            spg_iter += 1;
            // ∇φ = −2w
            let dir = clip(&(&delta + &w * (2.0 * step))) - &delta;
            let dnorm2 = dir.norm_squared();
            if dnorm2 == 0.0 {
                step = 1.0;
                continue;
            }
            let u = factors.solve_k(&dir);
            let curv = dir.dot(&u);
            // φ(δ + τd) = φ − 2τ dᵀw + τ² dᵀK⁻¹d
            let slope = dir.dot(&w);
            if curv <= 0.0 || slope <= 0.0 {
                break;
            }
            let tau = (slope / curv).min(1.0);
            delta += &dir * tau;
            w -= &u * tau;
            if spg_iter % 50 == 0 {
                w = factors.solve_k(&(targets - &delta));
            }
            step = (dnorm2 / (2.0 * curv)).clamp(1e-30, 1e30);
        }
        iterations += spg_iter;
        if pg_norm > tol && pg_norm > opts.fail_tol {
            return Err(KpcError::DeltaNonconvergence { pg_norm, iterations });
        }
    }

    let primal = (targets - &delta).dot(&w);
    let dual = 2.0 * w.dot(targets) - w.dot(&factors.mul_k(&w)) - 2.0 * noise_bound.dot(&w.abs());
    let interp_norm_sq = primal.min(dual).max(0.0);
    let value = (y_kinv_y - interp_norm_sq).max(0.0);
    Ok(DeltaSolution {
        value,
        interp_norm_sq,
        maximizer: delta,
        iterations,
        pg_norm,
    })
}

/// Primal active-set method for min (y − δ)ᵀK⁻¹(y − δ) over |δ| ≤ δ̄, started at clip(y).
///
/// With the working set W held on its bounds, the minimizer over the free components has
/// w = K⁻¹(y − δ) supported on W, so each subproblem is one solve with K_WW. Steps stop at the
/// first blocking bound; a bound whose multiplier has the wrong sign is released. φ decreases
/// monotonically. Returns (δ, w, iterations, converged).
fn active_set(
    factors: &GramFactors,
    targets: &DVector<f64>,
    noise_bound: &DVector<f64>,
    max_iter: usize,
) -> (DVector<f64>, DVector<f64>, usize, bool) {
    let n = targets.len();
    let gram = factors.gram();
    let jitter = factors.jitter();
    // sign[i] ∈ {−1, 1} on a bound, 0 when free; components with δ̄_i = 0 never leave.
    let mut sign: Vec<i8> = targets
        .iter()
        .zip(noise_bound.iter())
        .map(|(y, b)| if *y >= *b { 1 } else if *y <= -*b { -1 } else { 0 })
        .collect();
    let mut delta = DVector::from_iterator(
        n,
        targets.iter().zip(noise_bound.iter()).map(|(y, b)| y.clamp(-b, *b)),
    );
    let mut w = DVector::zeros(n);
    for it in 1..=max_iter {
        let working: Vec<usize> = (0..n).filter(|&i| sign[i] != 0).collect();
        w.fill(0.0);
        if !working.is_empty() {
            let m = working.len();
            let mut kw = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            for (a, &i) in working.iter().enumerate() {
                for (b, &j) in working.iter().enumerate() {
                    kw[(a, b)] = gram[(i, j)];
                }
                kw[(a, a)] += jitter;
                rhs[a] = targets[i] - delta[i];
            }
            let Some(chol) = Cholesky::new(kw) else {
                return (delta, w, it, false);
            };
            let ws = chol.solve(&rhs);
            for (a, &i) in working.iter().enumerate() {
                w[i] = ws[a];
            }
        }
        let kw = factors.mul_k(&w);
        // Longest feasible step towards the subproblem minimizer δ̂_F = y_F − (Kw)_F.
        let mut tau = 1.0;
        let mut block = None;
        for i in (0..n).filter(|&i| sign[i] == 0) {
            let d = targets[i] - kw[i] - delta[i];
            let room = if d > 0.0 {
                noise_bound[i] - delta[i]
            } else {
                -noise_bound[i] - delta[i]
            };
            if d != 0.0 && room / d < tau {
                tau = (room / d).max(0.0);
                block = Some((i, if d > 0.0 { 1 } else { -1 }));
            }
        }
        for i in (0..n).filter(|&i| sign[i] == 0) {
            delta[i] += tau * (targets[i] - kw[i] - delta[i]);
        }
        if let Some((i, s)) = block {
            delta[i] = f64::from(s) * noise_bound[i];
            sign[i] = s;
            continue;
        }
        // At the subproblem minimizer; release the bound with the worst multiplier.
        let scale = 1e-12 * w.amax();
        let mut worst = None;
        let mut worst_val = -scale;
        for &i in &working {
            let v = f64::from(sign[i]) * w[i];
            if noise_bound[i] > 0.0 && v < worst_val {
                worst_val = v;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => sign[i] = 0,
            None => {
                // w on the free components is zero by construction.
                for i in (0..n).filter(|&i| sign[i] == 0) {
                    w[i] = 0.0;
                }
                return (delta, w, it, true);
            }
        }
    }
    (delta, w, max_iter, false)
}

/// The three terms of the error bound at one query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundTerms {
    pub power: f64,
    /// P(z)·√(Γ² + Δ − yᵀK⁻¹y)
    pub complexity: f64,
    /// δ̄ᵀ|K⁻¹K_Zz|
    pub noise: f64,
    /// |yᵀ(K + KK/(Dλ))⁻¹K_Zz|
    pub regularization: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.complexity + self.noise + self.regularization
    }
}

/// Prediction and smoothed bound with gradients with respect to the feature vector.
#[derive(Clone, Debug)]
pub struct SmoothedEval {
    pub mean: f64,
    pub mean_grad: DVector<f64>,
    pub bound: f64,
    pub bound_grad: DVector<f64>,
}

/// A fitted scalar-output KRR model with cached bound constants.
#[derive(Clone, Debug)]
pub struct KrrModel {
    factors: Arc<GramFactors>,
    targets: DVector<f64>,
    noise_bound: DVector<f64>,
    alpha: DVector<f64>,
    delta_const: f64,
    interp_norm_sq: f64,
    gamma: f64,
    bound_radical: f64,
    skip_delta_qp: bool,
    // Dλ·K⁻¹α, so the regularization term is |reg_weightsᵀ K_Zz|.
    reg_weights: DVector<f64>,
}

impl KrrModel {
    pub fn fit(dataset: &Dataset, spec: &KernelSpec, lambda: f64, gamma_policy: GammaPolicy) -> Result<Self> {
        Self::fit_with(dataset, spec, lambda, gamma_policy, &FitOptions::default())
    }

    pub fn fit_with(
        dataset: &Dataset,
        spec: &KernelSpec,
        lambda: f64,
        gamma_policy: GammaPolicy,
        opts: &FitOptions,
    ) -> Result<Self> {
        dataset.validate()?;
        let factors = Arc::new(GramFactors::new(spec, lambda, &dataset.features)?);
        Self::fit_on_factors(factors, dataset, gamma_policy, opts)
    }

    /// Fits on precomputed factors; `dataset.features` must be the factors' features.
    pub fn fit_on_factors(
        factors: Arc<GramFactors>,
        dataset: &Dataset,
        gamma_policy: GammaPolicy,
        opts: &FitOptions,
    ) -> Result<Self> {
        dataset.validate()?;
        if dataset.features != factors.features {
            return Err(KpcError::InvalidArgument("dataset features differ from the shared factors".into()));
        }
        let targets = DVector::from_column_slice(&dataset.targets);
        let noise_bound = DVector::from_column_slice(&dataset.noise_bound);
        let alpha = factors.solve_reg(&targets);

        let (delta_const, interp_norm_sq) = if opts.skip_delta_qp {
            (0.0, 0.0)
        } else {
            let sol = delta_constant(&factors, &targets, &noise_bound, &opts.delta)?;
            log::debug!(
                "delta QP: value {:.4e}, interpolant norm² {:.4e}, {} iterations, pg {:.2e}",
                sol.value,
                sol.interp_norm_sq,
                sol.iterations,
                sol.pg_norm
            );
            (sol.value, sol.interp_norm_sq)
        };
        let mut model = Self::assemble(factors, targets, noise_bound, alpha, delta_const, interp_norm_sq, 0.0, opts.skip_delta_qp);
        let gamma = estimate_gamma(&model, gamma_policy)?;
        model.set_gamma(gamma)?;
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        factors: Arc<GramFactors>,
        targets: DVector<f64>,
        noise_bound: DVector<f64>,
        alpha: DVector<f64>,
        delta_const: f64,
        interp_norm_sq: f64,
        gamma: f64,
        skip_delta_qp: bool,
    ) -> Self {
        let n = targets.len() as f64;
        let reg_weights = factors.solve_k(&alpha) * (n * factors.lambda);
        KrrModel {
            factors,
            targets,
            noise_bound,
            alpha,
            delta_const,
            interp_norm_sq,
            gamma,
            bound_radical: 0.0,
            skip_delta_qp,
            reg_weights,
        }
    }

    fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(KpcError::InvalidArgument(format!("gamma {gamma} must be finite and nonnegative")));
        }
        self.gamma = gamma;
        self.bound_radical = if self.skip_delta_qp {
            gamma
        } else {
            // Γ² + Δ − yᵀK⁻¹y, written without the cancelling yᵀK⁻¹y.
            let arg = gamma * gamma - self.interp_norm_sq;
            if arg < -1e-8 * gamma * gamma {
                return Err(KpcError::GammaTooSmall {
                    gamma,
                    required: self.interp_norm_sq.sqrt(),
                });
            }
            arg.max(0.0).sqrt()
        };
        Ok(())
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.factors.spec
    }

    pub fn lambda(&self) -> f64 {
        self.factors.lambda
    }

    pub fn factors(&self) -> &Arc<GramFactors> {
        &self.factors
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.factors.features
    }

    pub fn dim(&self) -> usize {
        self.factors.spec.dim()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn noise_bound(&self) -> &DVector<f64> {
        &self.noise_bound
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn delta_const(&self) -> f64 {
        self.delta_const
    }

    pub fn interp_norm_sq(&self) -> f64 {
        self.interp_norm_sq
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn bound_radical(&self) -> f64 {
        self.bound_radical
    }

    pub fn skips_delta_qp(&self) -> bool {
        self.skip_delta_qp
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            features: self.factors.features.clone(),
            targets: self.targets.iter().copied().collect(),
            noise_bound: self.noise_bound.iter().copied().collect(),
        }
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(KpcError::dim("model query", self.dim(), z.len()));
        }
        Ok(())
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        Ok(self.predict_unchecked(z))
    }

    pub(crate) fn predict_unchecked(&self, z: &[f64]) -> f64 {
        self.factors.spec.kernel_vector_unchecked(&self.factors.features, z).dot(&self.alpha)
    }

    pub fn power_function(&self, z: &[f64]) -> Result<f64> {
        self.check(z)?;
        let k = self.factors.spec.kernel_vector_unchecked(&self.factors.features, z);
        Ok(self.factors.power_sq(&k).max(0.0).sqrt())
    }

    /// √(αᵀKα) with the unjittered Gram matrix.
    pub fn rkhs_norm(&self) -> f64 {
        let ka = self.factors.gram() * &self.alpha;
        self.alpha.dot(&ka).max(0.0).sqrt()
    }

    pub fn bound_terms(&self, z: &[f64]) -> Result<BoundTerms> {
        self.check(z)?;
        Ok(self.bound_terms_unchecked(z))
    }

    pub(crate) fn bound_terms_unchecked(&self, z: &[f64]) -> BoundTerms {
        let k = self.factors.spec.kernel_vector_unchecked(&self.factors.features, z);
        let v = self.factors.solve_k(&k);
        let power = self.factors.power_sq(&k).max(0.0).sqrt();
        let noise = self.noise_bound.iter().zip(v.iter()).map(|(b, x)| b * x.abs()).sum();
        BoundTerms {
            power,
            complexity: power * self.bound_radical,
            noise,
            regularization: self.reg_weights.dot(&k).abs(),
        }
    }

    /// β(z), the deterministic bound on |f̂(z) − f(z)|.
    pub fn error_bound(&self, z: &[f64]) -> Result<f64> {
        Ok(self.bound_terms(z)?.total())
    }

    /// Prediction and an over-approximation of β(z) that is differentiable in z.
    ///
    /// Absolute values become `smooth_abs(·, eps)` and P(z) becomes √(P(z)² + eps); both are
    /// upper bounds of the exact quantities.
    pub fn eval_smoothed(&self, z: &[f64], eps: f64) -> Result<SmoothedEval> {
        self.check(z)?;
        Ok(self.eval_smoothed_unchecked(z, eps))
    }

    pub(crate) fn eval_smoothed_unchecked(&self, z: &[f64], eps: f64) -> SmoothedEval {
        let spec = &self.factors.spec;
        let (k, jac) = spec.kernel_vector_with_jacobian_unchecked(&self.factors.features, z);
        let mean = k.dot(&self.alpha);
        let mean_grad = jac.tr_mul(&self.alpha);

        let v = self.factors.solve_k(&k);
        let p2 = self.factors.power_sq(&k);
        let p_s = (p2.max(0.0) + eps).sqrt();
        let mut bound = p_s * self.bound_radical;
        let mut bound_grad = if p2 > 0.0 && p_s > 0.0 {
            // dP²/dz = −2 Jᵀv
            jac.tr_mul(&v) * (-self.bound_radical / p_s)
        } else {
            DVector::zeros(z.len())
        };

        // δ̄ᵀ s(v): gradient Jᵀ K⁻¹ (δ̄ ∘ s'(v)) by one adjoint solve.
        let mut weights = DVector::zeros(v.len());
        for (d, &vd) in v.iter().enumerate() {
            let s = smooth_abs(vd, eps);
            bound += self.noise_bound[d] * s;
            if s > 0.0 {
                weights[d] = self.noise_bound[d] * vd / s;
            }
        }
        if weights.iter().any(|w| *w != 0.0) {
            bound_grad += jac.tr_mul(&self.factors.solve_k(&weights));
        }

        let r = self.reg_weights.dot(&k);
        let sr = smooth_abs(r, eps);
        bound += sr;
        if sr > 0.0 {
            bound_grad += jac.tr_mul(&self.reg_weights) * (r / sr);
        }

        SmoothedEval {
            mean,
            mean_grad,
            bound,
            bound_grad,
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            spec: self.factors.spec.clone(),
            lambda: self.factors.lambda,
            features: self.factors.features.clone(),
            targets: self.targets.iter().copied().collect(),
            noise_bound: self.noise_bound.iter().copied().collect(),
            alpha: self.alpha.iter().copied().collect(),
            delta: self.delta_const,
            interp_norm_sq: self.interp_norm_sq,
            gamma: self.gamma,
            skip_delta_qp: self.skip_delta_qp,
        }
    }

    /// Rebuilds a model from its document, recomputing factorizations and checking α.
    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let factors = Arc::new(GramFactors::new(&doc.spec, doc.lambda, &doc.features)?);
        Self::from_document_on_factors(doc, factors)
    }

    pub(crate) fn from_document_on_factors(doc: &ModelDocument, factors: Arc<GramFactors>) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(KpcError::SchemaVersion {
                what: "model document".into(),
                found: doc.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        let dataset = Dataset::new(doc.features.clone(), doc.targets.clone(), doc.noise_bound.clone())?;
        if dataset.features != factors.features {
            return Err(KpcError::Corrupt("model features differ from shared factors".into()));
        }
        let targets = DVector::from_column_slice(&doc.targets);
        let alpha = factors.solve_reg(&targets);
        let stored = DVector::from_column_slice(&doc.alpha);
        if stored.len() != alpha.len() {
            return Err(KpcError::dim("stored alpha", alpha.len(), stored.len()));
        }
        let err = (&alpha - &stored).amax();
        if err > 1e-8 * (1.0 + alpha.amax()) {
            return Err(KpcError::Corrupt(format!("stored weights disagree with refit by {err:.3e}")));
        }
        let noise_bound = DVector::from_column_slice(&doc.noise_bound);
        let mut model = Self::assemble(
            factors,
            targets,
            noise_bound,
            stored,
            doc.delta,
            doc.interp_norm_sq,
            0.0,
            doc.skip_delta_qp,
        );
        model.set_gamma(doc.gamma)?;
        Ok(model)
    }
}

/// Γ under the given policy.
pub fn estimate_gamma(model: &KrrModel, policy: GammaPolicy) -> Result<f64> {
    let gamma = match policy {
        GammaPolicy::Fixed(g) => g,
        GammaPolicy::Augment(factor) => {
            if !(factor.is_finite() && factor >= 1.0) {
                return Err(KpcError::InvalidArgument(format!("augmentation factor {factor} must be ≥ 1")));
            }
            factor * model.rkhs_norm()
        }
    };
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(KpcError::InvalidArgument(format!("gamma {gamma} must be finite and nonnegative")));
    }
    if !model.skip_delta_qp && gamma * gamma - model.interp_norm_sq < -1e-8 * gamma * gamma {
        return Err(KpcError::GammaTooSmall {
            gamma,
            required: model.interp_norm_sq.sqrt(),
        });
    }
    Ok(gamma)
}

/// Serialized form of a [`KrrModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub spec: KernelSpec,
    pub lambda: f64,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub noise_bound: Vec<f64>,
    pub alpha: Vec<f64>,
    pub delta: f64,
    pub interp_norm_sq: f64,
    pub gamma: f64,
    pub skip_delta_qp: bool,
}
