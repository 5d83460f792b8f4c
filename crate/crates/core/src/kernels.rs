//! Stationary kernels, Gram matrices and kernel-vector Jacobians.
//!
//! Two smooth, strictly positive-definite families are supported:
//!
//! | family | k(z, z') |
//! |--------|----------|
//! | squared exponential | σ² · exp(−r/2) |
//! | inverse multiquadric | σ² · (1 + r/c²)^(−1/2) |
//!
//! where r = Σ_j ((z_j − z'_j)/ℓ_j)² uses one lengthscale per input dimension.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KpcError, Result};

/// Scaled squared distance below which two data rows are treated as duplicates.
pub const DUPLICATE_THRESHOLD: f64 = 1e-12;

pub const DEFAULT_JITTER_REL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    InverseMultiquadric,
}

fn default_imq_offset() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER_REL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    #[serde(default = "default_imq_offset")]
    pub imq_offset: f64,
    #[serde(default = "default_jitter")]
    pub jitter_rel: f64,
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            signal_variance,
            lengthscales,
            imq_offset: default_imq_offset(),
            jitter_rel: DEFAULT_JITTER_REL,
        }
    }

    pub fn inverse_multiquadric(signal_variance: f64, lengthscales: Vec<f64>, offset: f64) -> Self {
        KernelSpec {
            family: KernelFamily::InverseMultiquadric,
            signal_variance,
            lengthscales,
            imq_offset: offset,
            jitter_rel: DEFAULT_JITTER_REL,
        }
    }

    pub fn with_jitter(mut self, jitter_rel: f64) -> Self {
        self.jitter_rel = jitter_rel;
        self
    }

    /// Input dimension the spec is built for.
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(KpcError::InvalidArgument("kernel needs at least one lengthscale".into()));
        }
        if let Some(l) = self.lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(KpcError::InvalidArgument(format!("lengthscale {l} must be positive")));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(KpcError::InvalidArgument(format!(
                "signal variance {} must be positive",
                self.signal_variance
            )));
        }
        if !(self.jitter_rel.is_finite() && self.jitter_rel >= 0.0) {
            return Err(KpcError::InvalidArgument(format!(
                "relative jitter {} must be nonnegative",
                self.jitter_rel
            )));
        }
        if self.family == KernelFamily::InverseMultiquadric
            && !(self.imq_offset.is_finite() && self.imq_offset > 0.0)
        {
            return Err(KpcError::InvalidArgument(format!(
                "inverse multiquadric offset {} must be positive",
                self.imq_offset
            )));
        }
        Ok(())
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(KpcError::dim("kernel input", self.dim(), z.len()));
        }
        Ok(())
    }

    /// Σ_j ((a_j − b_j)/ℓ_j)².
    pub(crate) fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum()
    }

    /// Kernel value as a function of the scaled squared distance.
    #[inline]
    pub(crate) fn profile(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => self.signal_variance * (-0.5 * r).exp(),
            KernelFamily::InverseMultiquadric => {
                let c2 = self.imq_offset * self.imq_offset;
                self.signal_variance / (1.0 + r / c2).sqrt()
            }
        }
    }

    /// d(profile)/dr.
    #[inline]
    fn profile_slope(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => -0.5 * self.signal_variance * (-0.5 * r).exp(),
            KernelFamily::InverseMultiquadric => {
                let c2 = self.imq_offset * self.imq_offset;
                -0.5 * self.signal_variance / c2 * (1.0 + r / c2).powf(-1.5)
            }
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        self.profile(self.scaled_sq_dist(a, b))
    }

    /// k(z, z); both families are stationary so this is σ².
    pub fn diagonal(&self) -> f64 {
        self.profile(0.0)
    }

    /// Kernel vector (k(z_1, z), …, k(z_D, z)) without dimension checks.
    pub(crate) fn kernel_vector_unchecked(&self, rows: &[Vec<f64>], z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(rows.len(), rows.iter().map(|r| self.eval_unchecked(r, z)))
    }

    /// Kernel vector and its Jacobian with respect to z, without dimension checks.
    pub(crate) fn kernel_vector_with_jacobian_unchecked(
        &self,
        rows: &[Vec<f64>],
        z: &[f64],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = z.len();
        let mut k = DVector::zeros(rows.len());
        let mut jac = DMatrix::zeros(rows.len(), p);
        for (d, row) in rows.iter().enumerate() {
            let r = self.scaled_sq_dist(row, z);
            k[d] = self.profile(r);
            let slope = self.profile_slope(r);
            for j in 0..p {
                let l = self.lengthscales[j];
                // dr/dz_j = 2 (z_j − row_j) / ℓ_j²
                jac[(d, j)] = slope * 2.0 * (z[j] - row[j]) / (l * l);
            }
        }
        (k, jac)
    }
}

pub fn eval_kernel(spec: &KernelSpec, z1: &[f64], z2: &[f64]) -> Result<f64> {
    spec.check_dim(z1)?;
    spec.check_dim(z2)?;
    Ok(spec.eval_unchecked(z1, z2))
}

/// Returns the first pair of rows closer than [`DUPLICATE_THRESHOLD`] in the scaled metric.
pub fn find_duplicate(spec: &KernelSpec, rows: &[Vec<f64>]) -> Option<(usize, usize, f64)> {
    for i in 0..rows.len() {
        for j in 0..i {
            let d = spec.scaled_sq_dist(&rows[i], &rows[j]);
            if d < DUPLICATE_THRESHOLD {
                return Some((j, i, d));
            }
        }
    }
    None
}

/// Gram matrix of the rows. With `apply_jitter`, `jitter_rel · mean(diag K)` is added to the
/// diagonal.
pub fn gram_matrix(spec: &KernelSpec, rows: &[Vec<f64>], apply_jitter: bool) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if rows.is_empty() {
        return Err(KpcError::InvalidArgument("gram matrix needs at least one row".into()));
    }
    for r in rows {
        spec.check_dim(r)?;
    }
    if let Some((first, second, dist)) = find_duplicate(spec, rows) {
        return Err(KpcError::DuplicateData { first, second, dist });
    }
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = spec.eval_unchecked(&rows[i], &rows[i]);
        for j in 0..i {
            let v = spec.eval_unchecked(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if apply_jitter {
        let jitter = spec.jitter_rel * k.diagonal().mean();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
    }
    Ok(k)
}

pub fn kernel_vector(spec: &KernelSpec, rows: &[Vec<f64>], z: &[f64]) -> Result<DVector<f64>> {
    spec.check_dim(z)?;
    for r in rows {
        spec.check_dim(r)?;
    }
    Ok(spec.kernel_vector_unchecked(rows, z))
}

/// Entry (d, j) is ∂k(z_d, z)/∂z_j.
pub fn kernel_vector_jacobian(spec: &KernelSpec, rows: &[Vec<f64>], z: &[f64]) -> Result<DMatrix<f64>> {
    spec.check_dim(z)?;
    for r in rows {
        spec.check_dim(r)?;
    }
    Ok(spec.kernel_vector_with_jacobian_unchecked(rows, z).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn se(sv: f64, ls: Vec<f64>) -> KernelSpec {
        KernelSpec::squared_exponential(sv, ls)
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn se_values() {
        let k = se(1.0, vec![1.0]);
        assert_eq!(eval_kernel(&k, &[0.3], &[0.3]).unwrap(), 1.0);
        assert!((eval_kernel(&k, &[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let k2 = se(2.0, vec![1.0, 2.0]);
        let v = eval_kernel(&k2, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((v - 0.735_758_882_342_884_7).abs() < 1e-12);
    }

    #[test]
    fn imq_values() {
        let k = KernelSpec::inverse_multiquadric(3.0, vec![0.5, 2.0], 1.5);
        assert_eq!(eval_kernel(&k, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 3.0);
        // r = (1/0.5)² = 4, 3 / sqrt(1 + 4/2.25)
        let v = eval_kernel(&k, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 3.0 / (1.0f64 + 4.0 / 2.25).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let k = se(1.0, vec![1.0, 1.0]);
        assert!(matches!(
            eval_kernel(&k, &[0.0], &[0.0, 1.0]),
            Err(KpcError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn small_grams() {
        let k = se(1.0, vec![1.0]).with_jitter(0.0);
        let g = gram_matrix(&k, &[vec![0.0]], true).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        let g = gram_matrix(&k, &[vec![0.0], vec![1.0]], false).unwrap();
        let e = (-0.5f64).exp();
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(0, 1)] - e).abs() < 1e-15 && (g[(1, 0)] - e).abs() < 1e-15);
    }

    #[test]
    fn jitter_is_relative_to_mean_diagonal() {
        let k = se(4.0, vec![1.0]).with_jitter(1e-3);
        let g = gram_matrix(&k, &[vec![0.0], vec![5.0]], true).unwrap();
        assert!((g[(0, 0)] - 4.004).abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_rejected() {
        let k = se(1.0, vec![1.0, 1.0]);
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1e-8]];
        match gram_matrix(&k, &rows, true) {
            Err(KpcError::DuplicateData { first, second, .. }) => assert_eq!((first, second), (0, 2)),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn jittered_gram_of_random_points_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = se(1.0, vec![0.7, 1.3]);
        let rows = random_rows(&mut rng, 3, 2);
        let g = gram_matrix(&k, &rows, true).unwrap();
        let eig = g.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn gram_is_psd_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.gen_range(1..=20);
            let p = rng.gen_range(1..=4);
            let ls: Vec<f64> = (0..p).map(|_| rng.gen_range(0.3..2.0)).collect();
            let sv = rng.gen_range(0.5..3.0);
            let spec = if trial % 2 == 0 {
                se(sv, ls)
            } else {
                KernelSpec::inverse_multiquadric(sv, ls, 1.0)
            };
            let rows = random_rows(&mut rng, n, p);
            let raw = gram_matrix(&spec, &rows, false).unwrap();
            let min_eig = raw.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-10 * sv, "trial {trial}: min eigenvalue {min_eig}");
            assert!(gram_matrix(&spec, &rows, true).unwrap().cholesky().is_some());
        }
    }

    #[test]
    fn kernel_vector_examples() {
        let k = se(2.5, vec![1.0]);
        let rows = vec![vec![0.0], vec![1.0]];
        let v = kernel_vector(&k, &rows, &[0.0]).unwrap();
        assert_eq!(v[0], 2.5);
        let far = kernel_vector(&k, &rows, &[100.0]).unwrap();
        assert!(far.iter().all(|x| *x < 1e-8 * 2.5));
        let k1 = se(1.0, vec![1.0]);
        let mid = kernel_vector(&k1, &rows, &[0.5]).unwrap();
        let e = (-0.125f64).exp();
        assert!((mid[0] - e).abs() < 1e-15 && (mid[1] - e).abs() < 1e-15);
    }

    #[test]
    fn jacobian_examples() {
        let k = se(1.0, vec![1.0]);
        let rows = vec![vec![0.0]];
        let j = kernel_vector_jacobian(&k, &rows, &[0.0]).unwrap();
        assert_eq!(j[(0, 0)], 0.0);
        let j = kernel_vector_jacobian(&k, &rows, &[1.0]).unwrap();
        assert!((j[(0, 0)] + (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in [KernelFamily::SquaredExponential, KernelFamily::InverseMultiquadric] {
            for _ in 0..20 {
                let p = 3;
                let spec = KernelSpec {
                    family,
                    signal_variance: 1.7,
                    lengthscales: vec![0.8, 1.1, 1.9],
                    imq_offset: 0.9,
                    jitter_rel: 0.0,
                };
                let rows = random_rows(&mut rng, 6, p);
                let z: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let jac = kernel_vector_jacobian(&spec, &rows, &z).unwrap();
                let h = 1e-6;
                for j in 0..p {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[j] += h;
                    zm[j] -= h;
                    let kp = kernel_vector(&spec, &rows, &zp).unwrap();
                    let km = kernel_vector(&spec, &rows, &zm).unwrap();
                    for d in 0..rows.len() {
                        let fd = (kp[d] - km[d]) / (2.0 * h);
                        let an = jac[(d, j)];
                        let scale = an.abs().max(1e-3);
                        assert!((fd - an).abs() / scale <= 1e-5, "{family:?} d={d} j={j}: {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_and_bounded_by_signal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = KernelSpec::inverse_multiquadric(2.0, vec![0.5, 1.5], 0.7);
        for _ in 0..200 {
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ab = eval_kernel(&spec, &a, &b).unwrap();
            assert_eq!(ab, eval_kernel(&spec, &b, &a).unwrap());
            assert!(ab > 0.0 && ab <= 2.0);
        }
    }
}
