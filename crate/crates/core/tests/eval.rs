use endogede_core::eval::{ate, depth_metrics, EvalReport, Scaling, Trajectory};
use endogede_core::geometry::PoseSE3;
use endogede_core::Tensor;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn depths(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

#[test]
fn depth_metrics_hand_example() {
    let r = depth_metrics(&depths(&[1.0, 2.0, 3.0, 4.0]), &depths(&[1.0, 2.0, 2.0, 5.0]), 150.0, Scaling::None)
        .unwrap();
    assert!((r.abs_rel - 0.175).abs() < 1e-12);
    assert!((r.sq_rel - 0.175).abs() < 1e-12);
    assert!((r.rmse - 0.5f64.sqrt()).abs() < 1e-12);
    let log = ((1.5f64.ln().powi(2) + 0.8f64.ln().powi(2)) / 4.0).sqrt();
    assert!((r.rmse_log - log).abs() < 1e-12);
    // ratio exactly 1.25 is not a hit
    assert_eq!(r.delta, 0.5);
    assert_eq!(r.n_pixels, 4);
}

#[test]
fn median_scaling_removes_a_global_scale() {
    let gt = depths(&[1.0, 3.0, 7.0, 2.5, 40.0]);
    let r = depth_metrics(&gt.map(|v| 3.7 * v), &gt, 150.0, Scaling::Median).unwrap();
    assert!((r.scale - 1.0 / 3.7).abs() < 1e-12);
    assert!(r.abs_rel < 1e-12 && r.rmse < 1e-12 && r.rmse_log < 1e-12);
    assert_eq!(r.delta, 1.0);
}

#[test]
fn cap_and_invalid_ground_truth_are_excluded() {
    let r = depth_metrics(&depths(&[1.0, 5.0, 5.0, 5.0]), &depths(&[1.0, 0.0, 200.0, -1.0]), 150.0, Scaling::None)
        .unwrap();
    assert_eq!(r.n_pixels, 1);
    assert_eq!(r.abs_rel, 0.0);
    assert!(depth_metrics(&depths(&[1.0]), &depths(&[0.0]), 150.0, Scaling::None).is_err());
    assert!(depth_metrics(&depths(&[0.0]), &depths(&[1.0]), 150.0, Scaling::None).is_err());
}

#[test]
fn merged_reports_equal_a_joint_evaluation() {
    let (p1, g1) = (depths(&[1.0, 2.2, 3.1]), depths(&[1.1, 2.0, 2.5]));
    let (p2, g2) = (depths(&[4.0, 0.5]), depths(&[3.0, 0.7]));
    let a = depth_metrics(&p1, &g1, 150.0, Scaling::None).unwrap();
    let b = depth_metrics(&p2, &g2, 150.0, Scaling::None).unwrap();
    let joint = depth_metrics(
        &depths(&[1.0, 2.2, 3.1, 4.0, 0.5]),
        &depths(&[1.1, 2.0, 2.5, 3.0, 0.7]),
        150.0,
        Scaling::None,
    )
    .unwrap();
    let m = EvalReport::merge(&[a, b]).unwrap();
    for (x, y) in [
        (m.abs_rel, joint.abs_rel),
        (m.sq_rel, joint.sq_rel),
        (m.rmse, joint.rmse),
        (m.rmse_log, joint.rmse_log),
        (m.delta, joint.delta),
    ] {
        assert!((x - y).abs() < 1e-12);
    }
}

fn helix(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let a = i as f64 * 0.6;
            [a.cos(), a.sin(), 0.15 * i as f64]
        })
        .collect()
}

fn trajectory(points: &[[f64; 3]], dt: f64) -> Trajectory {
    Trajectory::new(
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 * 0.1 + dt, PoseSE3::new([0.0, 0.1 * i as f64, 0.0], *p)))
            .collect(),
    )
    .unwrap()
}

fn similarity(points: &[[f64; 3]], s: f64, axis: [f64; 3], t: [f64; 3]) -> Vec<[f64; 3]> {
    let r = Rotation3::new(Vector3::from(axis));
    points
        .iter()
        .map(|p| {
            let q = r * Vector3::from(*p) * s + Vector3::from(t);
            [q.x, q.y, q.z]
        })
        .collect()
}

#[test]
fn ate_of_a_trajectory_against_itself_is_zero() {
    let g = trajectory(&helix(10), 0.0);
    assert!(ate(&g, &g).unwrap() < 1e-12);
}

#[test]
fn ate_ignores_similarity_transforms() {
    let pts = helix(10);
    let g = trajectory(&pts, 0.0);
    let p = trajectory(&similarity(&pts, 0.37, [0.3, -1.1, 0.4], [5.0, -2.0, 0.5]), 0.0);
    assert!(ate(&p, &g).unwrap() < 1e-9);
}

#[test]
fn timestamp_offsets_respect_the_association_window() {
    let pts = helix(10);
    let g = trajectory(&pts, 0.0);
    assert!(ate(&trajectory(&pts, 0.015), &g).unwrap() < 1e-12);
    assert!(ate(&trajectory(&pts, 0.05), &g).is_err());
}

/// ATE of a fixed similarity, evaluated directly.
fn residual(src: &[[f64; 3]], dst: &[[f64; 3]], x: &[f64; 7]) -> f64 {
    let moved = similarity(src, x[0].exp(), [x[1], x[2], x[3]], [x[4], x[5], x[6]]);
    let se: f64 = moved
        .iter()
        .zip(dst)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    (se / src.len() as f64).sqrt()
}

#[test]
fn ate_matches_a_direct_search_with_one_displaced_pose() {
    let gt_pts = helix(10);
    let mut pred_pts = gt_pts.clone();
    pred_pts[6][0] += 0.3;
    pred_pts[6][2] -= 0.2;
    let value = ate(&trajectory(&pred_pts, 0.0), &trajectory(&gt_pts, 0.0)).unwrap();

    // coordinate search over log-scale, rotation vector and translation
    let mut x = [0.0f64; 7];
    let mut best = residual(&pred_pts, &gt_pts, &x);
    let mut step = 0.5;
    while step > 1e-9 {
        let mut improved = false;
        for k in 0..7 {
            for dir in [-1.0, 1.0] {
                let mut y = x;
                y[k] += dir * step;
                let r = residual(&pred_pts, &gt_pts, &y);
                if r < best {
                    best = r;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    assert!(value <= best + 1e-9, "closed form {value} above search {best}");
    assert!((value - best).abs() < 1e-6, "closed form {value} vs search {best}");
    // never worse than leaving the prediction unaligned
    assert!(value <= (0.13f64 / 10.0).sqrt());
}

#[test]
fn tum_roundtrip_preserves_poses() {
    let g = trajectory(&helix(5), 0.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.txt");
    g.write_tum(&path).unwrap();
    let back = Trajectory::read_tum(&path).unwrap();
    for ((ta, pa), (tb, pb)) in g.poses().iter().zip(back.poses()) {
        assert!((ta - tb).abs() < 1e-9);
        let d = pa.inverse().compose(pb);
        assert!(d.angle() < 1e-8);
        assert!(d.translation.iter().all(|v| v.abs() < 1e-8));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ate_is_invariant_to_moving_the_prediction(
        s in 0.1f64..10.0,
        axis in prop::array::uniform3(-2.0f64..2.0),
        t in prop::array::uniform3(-10.0f64..10.0),
        noise in prop::collection::vec(-0.05f64..0.05, 30),
    ) {
        let gt_pts = helix(10);
        let noisy: Vec<[f64; 3]> = gt_pts
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + noise[3 * i], p[1] + noise[3 * i + 1], p[2] + noise[3 * i + 2]])
            .collect();
        let g = trajectory(&gt_pts, 0.0);
        let base = ate(&trajectory(&noisy, 0.0), &g).unwrap();
        let moved = ate(&trajectory(&similarity(&noisy, s, axis, t), 0.0), &g).unwrap();
        prop_assert!((base - moved).abs() < 1e-8 * (1.0 + base));
    }

    #[test]
    fn abs_rel_is_scale_free_under_median_scaling(
        gt in prop::collection::vec(0.5f64..50.0, 3..40),
        s in 0.01f64..100.0,
    ) {
        let g = depths(&gt);
        let noisy = Tensor::from_fn(&[gt.len()], |i| gt[i] * (1.0 + 0.1 * ((i * 7) % 5) as f64));
        let a = depth_metrics(&noisy, &g, 150.0, Scaling::Median).unwrap();
        let b = depth_metrics(&noisy.map(|v| s * v), &g, 150.0, Scaling::Median).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
        prop_assert!(a.abs_rel >= 0.0 && a.delta <= 1.0);
    }
}
