use mveks::synth::{self, MotionSpec, NoiseSpec, RigSpec, SynthConfig};

#[test]
fn member_noise_matches_configured_sigma() {
    let cfg = SynthConfig {
        seed: 13,
        n_frames: 10_000,
        n_models: 2,
        rig: RigSpec { n_views: 3, ..Default::default() },
        motion: MotionSpec { n_keypoints: 1, ..Default::default() },
        noise: NoiseSpec {
            sigma: vec![0.5, 1.0, 2.0],
            difficulty_spread: 0.0,
            outlier_rate: 0.0,
            confident_outlier_rate: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = synth::generate(&cfg).unwrap();
    let e = &data.ensembles[0];
    for c in 0..6 {
        let mut ss = 0.0;
        for t in 0..cfg.n_frames {
            for m in 0..2 {
                let r = e.value(t, c, m) - data.truth2d[0][(t, c)];
                ss += r * r;
            }
        }
        let sd = (ss / (2 * cfg.n_frames) as f64).sqrt();
        let want = cfg.sigma(c / 2);
        assert!((sd / want - 1.0).abs() < 0.05, "coord {c}: {sd} vs {want}");
    }
}

#[test]
fn output_files_are_reproducible() {
    let cfg = SynthConfig {
        seed: 2,
        n_frames: 50,
        motion: MotionSpec { n_keypoints: 2, ..Default::default() },
        noise: NoiseSpec { corrupted_frame_rate: 0.1, ..Default::default() },
        ..Default::default()
    };
    let snapshot = || {
        let dir = tempfile::tempdir().unwrap();
        synth::write_synth(&synth::generate(&cfg).unwrap(), dir.path()).unwrap();
        let mut files = Vec::new();
        let mut stack = vec![dir.path().to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.push((path.strip_prefix(dir.path()).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let a = snapshot();
    assert!(a.len() > 10);
    assert_eq!(a, snapshot());
}

#[test]
fn burst_corruption_covers_consecutive_frames() {
    let cfg = SynthConfig {
        seed: 4,
        n_frames: 1000,
        motion: MotionSpec { n_keypoints: 1, ..Default::default() },
        noise: NoiseSpec { corrupted_frame_rate: 0.1, corrupted_frame_burst: 10, corrupted_frame_views: 2, ..Default::default() },
        ..Default::default()
    };
    let data = synth::generate(&cfg).unwrap();
    let frames = data.corrupted_frames(&[synth::CorruptionKind::CorruptedFrame]);
    assert!(frames.len() > 30);
    let runs = frames.windows(2).filter(|w| w[1] != w[0] + 1).count() + 1;
    assert!(runs * 5 < frames.len(), "{runs} runs over {} frames", frames.len());
    for &t in &frames {
        let n = data.ledger.iter().filter(|c| c.frame == t && c.kind == synth::CorruptionKind::CorruptedFrame).count();
        assert_eq!(n, 2);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = SynthConfig::default();
    cfg.noise.corrupted_frame_views = 7;
    assert!(synth::generate(&cfg).is_err());
    let mut cfg = SynthConfig::default();
    cfg.rig.n_views = 1;
    assert!(synth::generate(&cfg).is_err());
}
