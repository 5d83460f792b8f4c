//! Randomized invariants of kernels, bounds and the robust reformulation.

use nalgebra::SymmetricEigen;
use proptest::prelude::*;

use kpc::kernels::{eval_kernel, gram_matrix, KernelSpec};
use kpc::model_bank::StateBox;
use kpc::regression::{Dataset, GammaPolicy, KrrModel};
use kpc::robust::{box_support_margin, intersect_boxes, robustify_step, Polytope};
use kpc::smoothing::smooth_abs;

fn points(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, dim), n)
}

fn spec_strategy(dim: usize) -> impl Strategy<Value = KernelSpec> {
    (
        0.2..3.0f64,
        prop::collection::vec(0.3..2.0f64, dim),
        any::<bool>(),
        0.5..2.0f64,
    )
        .prop_map(|(sv, ls, se, c)| {
            if se {
                KernelSpec::squared_exponential(sv, ls)
            } else {
                KernelSpec::inverse_multiquadric(sv, ls, c)
            }
        })
}

fn a_box(dim: usize) -> impl Strategy<Value = StateBox> {
    (prop::collection::vec(-2.0..2.0f64, dim), prop::collection::vec(0.0..1.5f64, dim)).prop_map(|(c, h)| {
        let lower = c.iter().zip(&h).map(|(c, h)| c - h).collect();
        let upper = c.iter().zip(&h).map(|(c, h)| c + h).collect();
        StateBox::new(lower, upper).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric_and_gram_is_psd(spec in spec_strategy(3), rows in points(12, 3)) {
        prop_assert_eq!(eval_kernel(&spec, &rows[0], &rows[1]).unwrap(), eval_kernel(&spec, &rows[1], &rows[0]).unwrap());
        let k = gram_matrix(&spec, &rows, false).unwrap();
        let min_eig = SymmetricEigen::new(k).eigenvalues.min();
        prop_assert!(min_eig >= -1e-10 * spec.diagonal());
    }

    #[test]
    fn support_margin_bounds_every_corner_and_is_attained(b in a_box(4), normal in prop::collection::vec(-1.0..1.0f64, 4), offset in -2.0..2.0f64) {
        let m = box_support_margin(&normal, offset, &b).unwrap();
        let corner = |c: &Vec<f64>| c.iter().zip(&normal).map(|(x, h)| x * h).sum::<f64>() - offset;
        let corners = b.corners();
        prop_assert!(corners.iter().all(|c| corner(c) <= m + 1e-12));
        prop_assert!(corners.iter().any(|c| (corner(c) - m).abs() <= 1e-12));
    }

    #[test]
    fn box_fits_polytope_iff_all_margins_nonpositive(b in a_box(2), lo in prop::collection::vec(-3.0..0.0f64, 2), width in prop::collection::vec(0.5..4.0f64, 2)) {
        let hi: Vec<f64> = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
        let p = Polytope::from_bounds(&lo, &hi).unwrap();
        let inside = (0..2).all(|j| b.lower[j] >= lo[j] && b.upper[j] <= hi[j]);
        let margins = robustify_step(&p, &b).unwrap();
        prop_assert_eq!(inside, margins.iter().all(|m| *m <= 0.0));
    }

    #[test]
    fn intersection_is_contained_in_every_operand(a in a_box(3), b in a_box(3)) {
        match intersect_boxes(&[a.clone(), b.clone()]) {
            Ok(c) => {
                for j in 0..3 {
                    prop_assert!(c.lower[j] >= a.lower[j] && c.lower[j] >= b.lower[j]);
                    prop_assert!(c.upper[j] <= a.upper[j] && c.upper[j] <= b.upper[j]);
                }
                prop_assert!(c.corners().iter().all(|x| a.contains(x) && b.contains(x)));
            }
            Err(_) => prop_assert!((0..3).any(|j| a.upper[j] < b.lower[j] || b.upper[j] < a.lower[j])),
        }
    }

    #[test]
    fn smooth_abs_dominates_abs(x in -10.0..10.0f64, eps in 1e-12..1e-2f64) {
        let s = smooth_abs(x, eps);
        prop_assert!(s >= x.abs());
        prop_assert!(s <= x.abs() + eps.sqrt() + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn larger_noise_bounds_never_shrink_the_bound(rows in points(15, 2), z in prop::collection::vec(-2.0..2.0f64, 2), scale in 1.0..4.0f64) {
        let spec = KernelSpec::squared_exponential(1.0, vec![0.8, 0.8]);
        let y: Vec<f64> = rows.iter().map(|r| (r[0] - r[1]).sin()).collect();
        let fit = |bound: f64| {
            let ds = Dataset::with_uniform_noise(rows.clone(), y.clone(), bound).unwrap();
            KrrModel::fit(&ds, &spec, 1e-4, GammaPolicy::Fixed(25.0))
        };
        if let (Ok(tight), Ok(loose)) = (fit(0.01), fit(0.01 * scale)) {
            let (bt, bl) = (tight.error_bound(&z).unwrap(), loose.error_bound(&z).unwrap());
            prop_assert!(bl >= bt - 1e-9 * (1.0 + bt), "{bl} < {bt}");
        }
    }

    #[test]
    fn smoothed_bound_over_approximates_exact_bound(rows in points(15, 2), z in prop::collection::vec(-2.0..2.0f64, 2), eps in 1e-12..1e-4f64) {
        let spec = KernelSpec::squared_exponential(1.0, vec![0.8, 0.8]);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[1]).collect();
        let ds = Dataset::with_uniform_noise(rows, y, 0.01).unwrap();
        if let Ok(m) = KrrModel::fit(&ds, &spec, 1e-4, GammaPolicy::Augment(2.0)) {
            let exact = m.error_bound(&z).unwrap();
            let smooth = m.eval_smoothed(&z, eps).unwrap();
            prop_assert!(exact >= 0.0);
            prop_assert!(smooth.bound >= exact - 1e-12);
            prop_assert!((smooth.mean - m.predict(&z).unwrap()).abs() <= 1e-12);
        }
    }
}
