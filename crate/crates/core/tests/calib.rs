use nalgebra::{Point2, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mveks::calib::{load_rig, look_at_camera, triangulate_median, triangulate_pair, write_rig};
use mveks::synth::SynthConfig;
use mveks::{Camera, Distortion, Intrinsics, Rig};

fn six_view_rig() -> Rig {
    SynthConfig::default().build_rig().unwrap()
}

fn projections(rig: &Rig, p: &Point3<f64>) -> Vec<Point2<f64>> {
    rig.cameras().iter().map(|c| c.project(p).unwrap()).collect()
}

fn jitter(q: &Point2<f64>, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Point2<f64> {
    Point2::new(q.x + noise.sample(rng), q.y + noise.sample(rng))
}

#[test]
fn noisy_pairs_scatter_around_truth() {
    let rig = six_view_rig();
    let truth = Point3::new(0.05, -0.1, 0.2);
    let clean = projections(&rig, &truth);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sum = Vector3::zeros();
    let mut n = 0.0;
    for _ in 0..200 {
        let obs: Vec<_> = clean.iter().map(|q| jitter(q, &noise, &mut rng)).collect();
        for a in 0..6 {
            for b in a + 1..6 {
                let pt = triangulate_pair(rig.camera(a), rig.camera(b), &obs[a], &obs[b]).unwrap();
                assert!(pt.residual > 0.0);
                sum += pt.point - truth;
                n += 1.0;
            }
        }
    }
    let bias = sum / n;
    assert!(bias.norm() < 1e-3, "mean pair error {bias:?}");
}

#[test]
fn corrupted_minority_view_is_outvoted() {
    let rig = six_view_rig();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut clean_err, mut bad_err, mut pair_err) = (0.0, 0.0, 0.0);
    let trials = 200;
    for i in 0..trials {
        let truth = Point3::new(0.1 * (i as f64 * 0.7).sin(), 0.1 * (i as f64 * 0.3).cos(), 0.05 * i as f64 / trials as f64);
        let obs: Vec<_> = projections(&rig, &truth).iter().map(|q| jitter(q, &noise, &mut rng)).collect();
        let clean: Vec<_> = obs.iter().map(|q| Some(*q)).collect();
        let mut bad = clean.clone();
        bad[2] = Some(obs[2] + nalgebra::Vector2::new(50.0, 0.0));
        clean_err += (triangulate_median(&rig, &clean).unwrap() - truth).norm();
        bad_err += (triangulate_median(&rig, &bad).unwrap() - truth).norm();
        let pair = triangulate_pair(rig.camera(2), rig.camera(3), &bad[2].unwrap(), &obs[3]).unwrap();
        pair_err += (pair.point - truth).norm();
    }
    let (clean_err, bad_err, pair_err) = (clean_err / trials as f64, bad_err / trials as f64, pair_err / trials as f64);
    assert!(bad_err < 3.0 * clean_err, "median {bad_err} vs clean {clean_err}");
    assert!(pair_err > 10.0 * bad_err, "pair with the corrupted view {pair_err} vs median {bad_err}");
}

#[test]
fn distorted_undistort_round_trip() {
    let intr = Intrinsics { fx: 900.0, fy: 880.0, cx: 330.0, cy: 250.0 };
    let dist = Distortion { k1: -0.2, k2: 0.05, p1: 0.001, p2: -0.002 };
    let cam = Camera::new("a", nalgebra::Matrix3::identity(), Vector3::zeros(), intr, dist).unwrap();
    for &(x, y) in &[(0.3, -0.1), (-0.2, 0.25), (0.0, 0.0), (0.35, 0.3)] {
        let p = Point3::new(2.0 * x, 2.0 * y, 2.0);
        let q = cam.project(&p).unwrap();
        let n = cam.undistort(&q).unwrap();
        assert!((n.x - x).abs() < 1e-10 && (n.y - y).abs() < 1e-10, "({x}, {y}) -> {n:?}");
    }
}

#[test]
fn calibration_file_round_trip() {
    let intr = Intrinsics { fx: 610.0, fy: 605.0, cx: 320.0, cy: 240.0 };
    let dist = Distortion { k1: -0.1, k2: 0.01, p1: 0.0005, p2: -0.0003 };
    let cams = (0..3)
        .map(|v| {
            let a = v as f64 * 2.0;
            look_at_camera(format!("c{v}"), Point3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.0), Point3::origin(), intr, dist)
                .unwrap()
        })
        .collect();
    let rig = Rig::new(cams).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rig.json");
    write_rig(&rig, &path).unwrap();
    let back = load_rig(&path).unwrap();
    let p = Point3::new(0.1, 0.2, -0.1);
    for (a, b) in rig.cameras().iter().zip(back.cameras()) {
        assert_eq!(a.name(), b.name());
        assert!((a.project(&p).unwrap() - b.project(&p).unwrap()).norm() < 1e-9);
    }
}
