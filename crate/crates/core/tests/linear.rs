use nalgebra::DMatrix;

use mveks::ensemble::{summarize, EnsembleSummary};
use mveks::linear::{fit_params, fit_pca, optimize_smoothing, smooth, LatentDim, DEFAULT_QUANTILE};
use mveks::smoothing::Smoothing;
use mveks::ssm::kalman_log_likelihood;
use mveks::synth::{self, MotionSpec, NoiseSpec, OcclusionWindow, RigSpec, Sinusoid, SynthConfig, SynthData};

fn clean(noise: NoiseSpec) -> NoiseSpec {
    NoiseSpec { outlier_rate: 0.0, confident_outlier_rate: 0.0, ..noise }
}

fn data(cfg: &SynthConfig) -> (SynthData, Vec<EnsembleSummary>) {
    let d = synth::generate(cfg).unwrap();
    let s = d.ensembles.iter().map(|e| summarize(e).unwrap()).collect();
    (d, s)
}

fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for t in rows {
        for c in cols.clone() {
            s += (a[(t, c)] - b[(t, c)]).powi(2);
            n += 1.0;
        }
    }
    (s / n).sqrt()
}

#[test]
fn two_view_motion_is_three_dimensional() {
    let cfg = SynthConfig {
        seed: 31,
        rig: RigSpec { n_views: 2, ..Default::default() },
        motion: MotionSpec { n_keypoints: 4, ..Default::default() },
        ..Default::default()
    };
    let (_, summaries) = data(&cfg);
    let mean = summaries.iter().map(|s| fit_pca(s, DEFAULT_QUANTILE).unwrap().explained()[2]).sum::<f64>() / 4.0;
    assert!(mean >= 0.99, "d=3 explains {mean}");
}

#[test]
fn selected_s_is_a_local_optimum() {
    let cfg = SynthConfig {
        seed: 32,
        n_frames: 1500,
        motion: MotionSpec { n_keypoints: 1, ..Default::default() },
        noise: clean(NoiseSpec::default()),
        ..Default::default()
    };
    let (_, summaries) = data(&cfg);
    let s = &summaries[0];
    let model = fit_params(s, LatentDim::Fixed(3), DEFAULT_QUANTILE).unwrap();
    let fit = optimize_smoothing(&model, s, Smoothing::Auto).unwrap();
    let ll = |scale: f64| {
        kalman_log_likelihood(&model.with_smoothing(fit.s * scale).to_lgssm(&s.variance), &s.median).unwrap()
    };
    assert!(fit.log_likelihood >= fit.log_likelihood_init);
    assert!(ll(1.0) > ll(10.0) && ll(1.0) > ll(0.1));
}

#[test]
fn oversmoothing_distorts_oscillations() {
    let cfg = SynthConfig {
        seed: 33,
        n_frames: 2000,
        motion: MotionSpec {
            n_keypoints: 1,
            sinusoids: vec![Sinusoid { amplitude: 0.08, period: 25.0 }],
            ..Default::default()
        },
        noise: clean(NoiseSpec::default()),
        ..Default::default()
    };
    let (d, summaries) = data(&cfg);
    let s = &summaries[0];
    let model = fit_params(s, LatentDim::Fixed(3), DEFAULT_QUANTILE).unwrap();
    let fit = optimize_smoothing(&model, s, Smoothing::Auto).unwrap();
    let good = smooth(&model.with_smoothing(fit.s), s).unwrap();
    let over = smooth(&model.with_smoothing(fit.s / 100.0), s).unwrap();
    let all = 0..cfg.n_frames;
    let e_good = rmse(&good.means, &d.truth2d[0], all.clone(), 0..12);
    let e_over = rmse(&over.means, &d.truth2d[0], all, 0..12);
    assert!(e_over > e_good, "s*/100 {e_over} vs s* {e_good}");
}

#[test]
fn occluded_view_follows_the_other_views() {
    let window = 400..450;
    let cfg = SynthConfig {
        seed: 34,
        n_frames: 1000,
        motion: MotionSpec { n_keypoints: 1, ..Default::default() },
        noise: clean(NoiseSpec {
            occlusions: vec![OcclusionWindow {
                keypoint: None,
                view: 1,
                start: window.start,
                length: window.len(),
                bias: [15.0, -10.0],
            }],
            ..Default::default()
        }),
        ..Default::default()
    };
    let (d, summaries) = data(&cfg);
    let mut var = summaries[0].variance.clone();
    for t in window.clone() {
        var[(t, 2)] = 1e6;
        var[(t, 3)] = 1e6;
    }
    let s = summaries[0].with_variance(var);
    let model = fit_params(&s, LatentDim::Fixed(3), DEFAULT_QUANTILE).unwrap();
    let fit = optimize_smoothing(&model, &s, Smoothing::Auto).unwrap();
    let track = smooth(&model.with_smoothing(fit.s), &s).unwrap();
    let smoothed = rmse(&track.means, &d.truth2d[0], window.clone(), 2..4);
    let median = rmse(&s.median, &d.truth2d[0], window, 2..4);
    assert!(smoothed < median / 4.0, "smoothed {smoothed} vs median {median}");
}
