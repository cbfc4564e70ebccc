//! Property tests for the spline, alignment, and robust-loss invariants.

use garlileo::eval::{align_rigid, compute_ape, Alignment};
use garlileo::pipeline::{Trajectory, TrajectoryPoint};
use garlileo::so3;
use garlileo::solver::cauchy_weight;
use garlileo::spline::{KnotGrid, SplineR3, SplineSo3};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

mod common;
use common::cox_de_boor_eval;

fn ctrl_strategy(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), n..=n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Spline evaluation equals brute-force Cox-de Boor basis summation.
    #[test]
    fn spline_matches_basis_recursion(
        ctrl in ctrl_strategy(8),
        t in 0.0..5.999f64,
    ) {
        let grid = KnotGrid::new(0.0, 1.0, 8).unwrap();
        let ctrl: Vec<Vector3<f64>> = ctrl.into_iter().map(Vector3::from).collect();
        let s = SplineR3::new(grid, ctrl.clone()).unwrap();
        let got = s.eval(t).unwrap();
        let want = cox_de_boor_eval(&ctrl, 0.0, 1.0, t);
        prop_assert!((got - want).norm() <= 1e-9, "{got:?} vs {want:?}");
    }

    /// First derivatives agree with central finite differences.
    #[test]
    fn spline_derivative_matches_differences(
        ctrl in ctrl_strategy(8),
        t in 0.01..5.99f64,
    ) {
        let grid = KnotGrid::new(0.0, 1.0, 8).unwrap();
        let ctrl: Vec<Vector3<f64>> = ctrl.into_iter().map(Vector3::from).collect();
        let s = SplineR3::new(grid, ctrl).unwrap();
        let h = 1e-6;
        let fd = (s.eval(t + h).unwrap() - s.eval(t - h).unwrap()) / (2.0 * h);
        let d = s.deriv(t).unwrap();
        prop_assert!((d - fd).norm() <= 1e-4 * d.norm().max(1.0));
    }

    /// Perturbing one control point changes the value only inside the three
    /// segments it supports.
    #[test]
    fn control_point_locality(
        ctrl in ctrl_strategy(9),
        m in 0usize..9,
        seg in 0usize..7,
    ) {
        let grid = KnotGrid::new(0.0, 1.0, 9).unwrap();
        let ctrl: Vec<Vector3<f64>> = ctrl.into_iter().map(Vector3::from).collect();
        let base = SplineR3::new(grid, ctrl.clone()).unwrap();
        let mut bumped = ctrl;
        bumped[m] += Vector3::new(1.0, -0.5, 0.25);
        let bumped = SplineR3::new(grid, bumped).unwrap();
        let t = seg as f64 + 0.5;
        let changed = (bumped.eval(t).unwrap() - base.eval(t).unwrap()).norm() > 1e-12;
        let supported = seg + 2 >= m && seg <= m;
        prop_assert_eq!(changed, supported);
    }

    /// Every evaluated rotation stays orthonormal.
    #[test]
    fn so3_closure(
        axes in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 6..=6),
        t in 0.0..3.999f64,
    ) {
        let grid = KnotGrid::new(0.0, 1.0, 6).unwrap();
        let ctrl: Vec<UnitQuaternion<f64>> = axes
            .into_iter()
            .map(|a| so3::exp(&Vector3::new(a[0], a[1], a[2])))
            .collect();
        let s = SplineSo3::new(grid, ctrl).unwrap();
        let r = s.eval(t).unwrap().to_rotation_matrix().into_inner();
        prop_assert!(so3::orthonormality_defect(&r) <= 1e-9);
    }

    /// The Cauchy IRLS weight lies in (0, 1] and decreases with |e|.
    #[test]
    fn cauchy_weight_shape(e in -50.0..50.0f64, c in 0.01..5.0f64) {
        let w = cauchy_weight(e, c);
        prop_assert!(w > 0.0 && w <= 1.0);
        prop_assert!(cauchy_weight(e * 2.0, c) <= w + 1e-15);
    }

    /// APE after rigid alignment is invariant to any rigid pre-transform of
    /// the estimate.
    #[test]
    fn ape_alignment_invariance(
        yaw in -3.0..3.0f64,
        shift in prop::array::uniform3(-10.0..10.0f64),
        wiggle in prop::collection::vec(prop::array::uniform3(-0.05..0.05f64), 6..=6),
    ) {
        let est = Trajectory {
            points: (0..6)
                .map(|k| TrajectoryPoint {
                    stamp: k as f64,
                    position: Vector3::new(k as f64, (k as f64 * 0.7).sin(), 0.1 * k as f64),
                    orientation: so3::rot_z(0.1 * k as f64),
                })
                .collect(),
        };
        let mut gt = est.clone();
        for (p, w) in gt.points.iter_mut().zip(&wiggle) {
            p.position += Vector3::new(w[0], w[1], w[2]);
        }
        let (a, _) = align_rigid(&est, &gt).unwrap();
        let base = compute_ape(&est, &a.apply(&gt)).unwrap();

        let pre = Alignment { r: so3::rot_z(yaw), t: Vector3::from(shift) };
        let est2 = pre.apply(&est);
        let (a2, _) = align_rigid(&est2, &gt).unwrap();
        let moved = compute_ape(&est2, &a2.apply(&gt)).unwrap();
        prop_assert!((base.ape_t - moved.ape_t).abs() <= 1e-9);
    }
}
