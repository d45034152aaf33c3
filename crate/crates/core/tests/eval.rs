use mveks::ensemble::summarize;
use mveks::eval::{error_vs_esd, finite_mean, reprojection_error_3d, EsdPooling};
use mveks::nonlinear::fit_and_smooth;
use mveks::smoothing::Smoothing;
use mveks::synth::{self, CorruptionKind, MotionSpec, NoiseSpec, SynthConfig};

fn cfg(seed: u64, noise: NoiseSpec) -> SynthConfig {
    SynthConfig { seed, n_frames: 800, motion: MotionSpec { n_keypoints: 3, ..Default::default() }, noise, ..Default::default() }
}

#[test]
fn error_rises_with_ensemble_spread() {
    let data = synth::generate(&cfg(61, NoiseSpec { outlier_rate: 0.05, ..Default::default() })).unwrap();
    let summaries: Vec<_> = data.ensembles.iter().map(|e| summarize(e).unwrap()).collect();
    let pred: Vec<_> = summaries.iter().map(|s| s.median.clone()).collect();
    let esd: Vec<_> = summaries.iter().map(|s| s.esd.clone()).collect();
    let th = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
    let curve = error_vs_esd(&pred, &data.truth2d, &esd, &th, EsdPooling::Max).unwrap();
    let means: Vec<f64> = curve.mean_error.iter().map(|m| m.unwrap()).collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
    assert!(curve.counts.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn consistent_predictions_reproject_exactly() {
    let data = synth::generate(&cfg(62, NoiseSpec::default())).unwrap();
    for truth in &data.truth2d {
        let err = reprojection_error_3d(&data.rig, truth).unwrap();
        assert!(err.iter().all(|&e| e < 1e-8), "max {}", err.iter().copied().fold(0.0, f64::max));
    }
}

#[test]
fn nonlinear_outputs_reproject_exactly() {
    let data = synth::generate(&cfg(63, NoiseSpec::default())).unwrap();
    let s = summarize(&data.ensembles[0]).unwrap();
    let (_, _, track, _) = fit_and_smooth(&data.rig, &s, Smoothing::Auto).unwrap();
    let err = reprojection_error_3d(&data.rig, &track.means).unwrap();
    assert!(err.iter().all(|&e| e < 1e-8), "max {}", err.iter().copied().fold(0.0, f64::max));
}

#[test]
fn median_reprojection_error_is_larger_on_corrupted_frames() {
    let noise = NoiseSpec { confident_outlier_rate: 0.03, ..Default::default() };
    let data = synth::generate(&cfg(64, noise)).unwrap();
    for (k, e) in data.ensembles.iter().enumerate() {
        let s = summarize(e).unwrap();
        let err = reprojection_error_3d(&data.rig, &s.median).unwrap();
        assert!(err.iter().all(|&e| e > 0.0));
        let bad: Vec<usize> = data
            .corrupted_cells(&[CorruptionKind::ConfidentOutlier])
            .into_iter()
            .filter(|&(kk, _)| kk == k)
            .map(|(_, t)| t)
            .collect();
        let on = finite_mean(bad.iter().map(|&t| &err[t])).unwrap();
        let off = finite_mean((0..err.len()).filter(|t| !bad.contains(t)).map(|t| &err[t])).unwrap();
        assert!(on > off, "keypoint {k}: corrupted {on} vs clean {off}");
    }
}
