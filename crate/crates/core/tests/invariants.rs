use geocollapse::bounds::{transfer_bound_rhs, EnsembleStats};
use geocollapse::metrics::{class_stats, geometric_collapse, nc_measure};
use geocollapse::transfer::{augment, ridge_fit};
use ndarray::Array2;
use proptest::prelude::*;

/// Rotation by `angle` in the (a, b) coordinate plane.
fn givens(dim: usize, a: usize, b: usize, angle: f64) -> Array2<f64> {
    let mut q = Array2::<f64>::eye(dim);
    let (s, c) = angle.sin_cos();
    q[[a, a]] = c;
    q[[b, b]] = c;
    q[[a, b]] = -s;
    q[[b, a]] = s;
    q
}

fn points(k: usize, per: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, k * per * dim).prop_map(move |v| Array2::from_shape_vec((k * per, dim), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nc_invariant_under_rigid_motion_and_scale(
        z in points(3, 4, 3),
        angle in 0.0f64..std::f64::consts::TAU,
        shift in prop::collection::vec(-10.0f64..10.0, 3),
        scale in 0.1f64..10.0,
    ) {
        let y: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let base = class_stats(z.view(), &y, 3).unwrap();
        prop_assume!(base.min_dist() > 1e-3);
        let nc = nc_measure(&base).unwrap();
        let q = givens(3, 0, 2, angle);
        let mut moved = z.dot(&q.t()) * scale;
        for mut row in moved.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v += s;
            }
        }
        let s2 = class_stats(moved.view(), &y, 3).unwrap();
        let nc2 = nc_measure(&s2).unwrap();
        prop_assert!((nc - nc2).abs() <= 1e-9 * nc.max(1e-12), "{} vs {}", nc, nc2);
        // Geometric collapse scales as 1 / scale² at fixed GC.
        let g1 = geometric_collapse(1.0, &base).unwrap();
        let g2 = geometric_collapse(1.0, &s2).unwrap();
        prop_assert!((g1 - g2 * scale * scale).abs() <= 1e-9 * g1);
    }

    #[test]
    fn ridge_scores_invariant_under_rotation(
        z in points(3, 3, 4),
        q_points in points(2, 3, 4),
        angle in 0.0f64..std::f64::consts::TAU,
        lambda in 0.01f64..5.0,
    ) {
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let q = givens(4, 1, 3, angle);
        let head = ridge_fit(z.view(), &labels, 3, lambda).unwrap();
        let rotated = ridge_fit(z.dot(&q.t()).view(), &labels, 3, lambda).unwrap();
        let scores = augment(q_points.view()).dot(&head.weight);
        let scores_rot = augment(q_points.dot(&q.t()).view()).dot(&rotated.weight);
        for (a, b) in scores.iter().zip(scores_rot.iter()) {
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn transfer_bound_monotone(
        gc in 0.0f64..10.0,
        sup_gc in 0.0f64..10.0,
        h in 0.0f64..5.0,
        extra in 0.0f64..3.0,
        c_t in 0.1f64..5.0,
    ) {
        let z = Array2::from_shape_vec((4, 1), vec![0.0, 0.2, 3.0, 3.3]).unwrap();
        let stats = class_stats(z.view(), &[0, 0, 1, 1], 2).unwrap();
        let ens = |sup_gc_per_class: f64, rademacher_h: f64| EnsembleStats {
            delta_fstar: 2.0,
            sup_gc_per_class,
            sup_embed_norm: 3.0,
            rademacher_h,
            rademacher_h_std: 0.0,
            ensemble_size: 1,
        };
        let base = transfer_bound_rhs(gc, &stats, &ens(sup_gc, h), 1.0, c_t, 0.1, 2).unwrap();
        prop_assert!((base.total - (base.term1 + base.term2 + base.term3)).abs() <= 1e-12 * base.total.max(1.0));
        prop_assert!(transfer_bound_rhs(gc + extra, &stats, &ens(sup_gc, h), 1.0, c_t, 0.1, 2).unwrap().total >= base.total);
        prop_assert!(transfer_bound_rhs(gc, &stats, &ens(sup_gc + extra, h), 1.0, c_t, 0.1, 2).unwrap().total >= base.total);
        prop_assert!(transfer_bound_rhs(gc, &stats, &ens(sup_gc, h + extra), 1.0, c_t, 0.1, 2).unwrap().total >= base.total);
    }
}
