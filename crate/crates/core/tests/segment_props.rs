use mfdelay::segment::{DelayKernel, LiftedVector, SegmentGrid};
use proptest::prelude::*;

fn grid_and_vectors() -> impl Strategy<Value = (SegmentGrid, Vec<f64>, Vec<f64>)> {
    (1usize..4, 1usize..24, 0.05f64..2.0).prop_flat_map(|(n, m, d)| {
        let dim = (m + 1) * n;
        (
            Just(SegmentGrid::new(n, m, d).unwrap()),
            prop::collection::vec(-3.0f64..3.0, dim),
            prop::collection::vec(-3.0f64..3.0, dim),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn semigroup_law_is_exact((g, x, _y) in grid_and_vectors(), j in 0usize..30, k in 0usize..30) {
        let x = LiftedVector::from_flat(&g, x).unwrap();
        prop_assert_eq!(x.shift(j).shift(k), x.shift(j + k));
        prop_assert_eq!(x.shift(0), x);
    }

    #[test]
    fn shift_adjoint_identity((g, x, y) in grid_and_vectors(), k in 0usize..30) {
        let x = LiftedVector::from_flat(&g, x).unwrap();
        let y = LiftedVector::from_flat(&g, y).unwrap();
        let lhs = x.shift(k).inner(&y).unwrap();
        let rhs = x.inner(&y.shift_adjoint(k)).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + x.norm() * y.norm()));
    }

    #[test]
    fn pseudo_contraction((g, x, _y) in grid_and_vectors(), k in 0usize..30) {
        let x = LiftedVector::from_flat(&g, x).unwrap();
        let bound = (0.5 * k as f64 * g.dtheta()).exp() * x.norm();
        prop_assert!(x.shift(k).norm() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn embedding_is_an_isometry((g, x, y) in grid_and_vectors()) {
        let n = g.n();
        let e = g.embed(&x[..n]).unwrap();
        let h2: f64 = x[..n].iter().map(|v| v * v).sum();
        prop_assert!((e.norm() - h2.sqrt()).abs() <= 1e-12 * (1.0 + h2.sqrt()));
        // projection onto the head is the adjoint of the embedding
        let y = LiftedVector::from_flat(&g, y).unwrap();
        let lhs = e.inner(&y).unwrap();
        let rhs: f64 = x[..n].iter().zip(y.project_head()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn whitening_round_trips((g, x, _y) in grid_and_vectors()) {
        let v = LiftedVector::from_flat(&g, x).unwrap();
        let w = v.whitened();
        let back = LiftedVector::from_whitened(&g, &w).unwrap();
        prop_assert!(back.max_abs_diff(&v).unwrap() <= 1e-12);
        let euclid: f64 = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((euclid - v.norm()).abs() <= 1e-12 * (1.0 + euclid));
    }

    #[test]
    fn kernel_pairing_is_linear((g, x, y) in grid_and_vectors(), a in -2.0f64..2.0) {
        let kern = DelayKernel::from_fn(&g, |t| (1.0 + t).sin());
        let xv = LiftedVector::from_flat(&g, x).unwrap();
        let yv = LiftedVector::from_flat(&g, y).unwrap();
        let mut z = xv.clone();
        z.add_scaled(a, &yv).unwrap();
        let pz = kern.pairing(&z);
        let (px, py) = (kern.pairing(&xv), kern.pairing(&yv));
        for i in 0..g.n() {
            prop_assert!((pz[i] - px[i] - a * py[i]).abs() <= 1e-12 * (1.0 + pz[i].abs()));
        }
    }
}

#[test]
fn tail_of_ones_has_unit_segment_mass() {
    let g = SegmentGrid::new(1, 4, 1.0).unwrap();
    let v = LiftedVector::new(&g, &[0.0], &[1.0; 4]).unwrap();
    assert!((v.inner(&v).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn one_step_shift_example() {
    let g = SegmentGrid::new(1, 2, 1.0).unwrap();
    let v = LiftedVector::new(&g, &[5.0], &[1.0, 2.0]).unwrap();
    let s = v.shift(1);
    assert_eq!(s.head(), &[5.0]);
    assert_eq!(s.segment(), &[2.0, 5.0]);
}

#[test]
fn long_shift_saturates_at_the_head() {
    let g = SegmentGrid::new(2, 3, 0.5).unwrap();
    let v = LiftedVector::new(&g, &[1.0, -1.0], &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    for k in [3, 4, 100] {
        let s = v.shift(k);
        assert_eq!(s.segment(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }
}

#[test]
fn constant_kernel_pairs_constant_segment() {
    let (d, c, x) = (0.75, 2.5, 1.2);
    let g = SegmentGrid::new(1, 12, d).unwrap();
    let kern = DelayKernel::from_fn(&g, |_| c);
    let v = LiftedVector::new(&g, &[0.0], &[x; 12]).unwrap();
    assert!((kern.pairing(&v)[0] - d * c * x).abs() < 1e-12);
}
