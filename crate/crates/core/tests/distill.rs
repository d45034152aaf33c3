use std::collections::BTreeSet;

use mveks::distill::{
    emit_pseudolabels, kmeans, pose_vectors_at, quality_filter, read_labels, select_video, PoseSource, PseudoLabelSet, RigProfile, SelectConfig,
    Strategy, VideoPredictions,
};
use mveks::ensemble::{read_ensemble_dir, summarize, EnsembleSummary};
use mveks::synth::{self, CorruptionKind, MotionSpec, NoiseSpec, SynthConfig, SynthData};

fn data(cfg: &SynthConfig) -> (SynthData, Vec<EnsembleSummary>) {
    let d = synth::generate(cfg).unwrap();
    let s = d.ensembles.iter().map(|e| summarize(e).unwrap()).collect();
    (d, s)
}

fn small(seed: u64, video: &str) -> SynthConfig {
    SynthConfig {
        seed,
        video: video.into(),
        n_frames: 600,
        motion: MotionSpec { n_keypoints: 4, ..Default::default() },
        ..Default::default()
    }
}

fn config(nf: usize, nv: usize, pose: PoseSource<'_>) -> SelectConfig<'_> {
    SelectConfig { nf, nv, seed: 0, strategy: Strategy::Targeted, pose, median_center: true }
}

#[test]
fn profile_defaults() {
    assert_eq!(RigProfile::default().default_nf(), 450);
    assert_eq!(RigProfile::Fly.default_nf(), 450);
    assert_eq!(RigProfile::Mouse.default_nf(), 21000);
    assert_eq!(RigProfile::Chickadee.default_nf(), 1200);
}

#[test]
fn quality_filter_drops_corrupted_frames() {
    let cfg = SynthConfig {
        seed: 21,
        n_frames: 2000,
        motion: MotionSpec { n_keypoints: 3, ..Default::default() },
        noise: NoiseSpec { corrupted_frame_rate: 0.1, ..Default::default() },
        ..Default::default()
    };
    let (d, summaries) = data(&cfg);
    let corrupted: BTreeSet<i64> =
        d.corrupted_frames(&[CorruptionKind::CorruptedFrame]).into_iter().map(|t| t as i64).collect();
    assert!(corrupted.len() > 150);
    let pred = VideoPredictions::from_summaries("v", &summaries).unwrap();
    let kept = quality_filter(&pred.scores(), 1000);
    assert_eq!(kept.len(), 1000);
    let clean = kept.iter().filter(|s| !corrupted.contains(&s.frame)).count();
    assert!(clean >= 950, "{clean}/1000 retained frames are clean");
}

#[test]
fn pca_poses_select_like_triangulated_poses() {
    let mut cfg = small(22, "v");
    cfg.noise = NoiseSpec { outlier_rate: 0.0, confident_outlier_rate: 0.0, ..Default::default() };
    cfg.motion.sinusoids = vec![synth::Sinusoid { amplitude: 0.15, period: 150.0 }];
    let (d, summaries) = data(&cfg);
    let pred = VideoPredictions::from_summaries("v", &summaries).unwrap();
    let (nf, nv) = (450, 25);
    let kept = quality_filter(&pred.scores(), nf);
    let rows: Vec<usize> = kept.iter().map(|s| s.frame as usize).collect();
    let tri_poses = pose_vectors_at(&pred, PoseSource::Triangulate(&d.rig), true, &rows).unwrap();
    let clusters = kmeans(&tri_poses, nv, 0).unwrap().assignments;
    let cluster_of = |frame: i64| clusters[kept.iter().position(|s| s.frame == frame).unwrap()];
    let covered = |pose| -> BTreeSet<usize> {
        select_video(&pred, &config(nf, nv, pose)).unwrap().into_iter().map(|s| cluster_of(s.frame)).collect()
    };
    let tri = covered(PoseSource::Triangulate(&d.rig));
    let pca = covered(PoseSource::Pca);
    assert_eq!(tri.len(), nv);
    let jaccard = tri.intersection(&pca).count() as f64 / tri.union(&pca).count() as f64;
    assert!(jaccard >= 0.8, "cluster Jaccard {jaccard}");
}

#[test]
fn emitted_labels_have_nv_rows_per_video_and_round_trip() {
    let mut set: Option<PseudoLabelSet> = None;
    for (seed, video) in [(23, "a"), (24, "b")] {
        let (d, summaries) = data(&small(seed, video));
        let pred = VideoPredictions::from_summaries(video, &summaries).unwrap();
        let sel = select_video(&pred, &config(450, 25, PoseSource::Triangulate(&d.rig))).unwrap();
        assert_eq!(sel.len(), 25);
        let labels = PseudoLabelSet::from_selection(&pred, &sel).unwrap();
        match &mut set {
            None => set = Some(labels),
            Some(s) => s.extend(labels).unwrap(),
        }
    }
    let set = set.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model_0");
    emit_pseudolabels(&set, None, &out).unwrap();
    for view in &set.view_names {
        let text = std::fs::read_to_string(out.join(format!("{view}.csv"))).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 50);
        for video in ["a", "b"] {
            assert_eq!(rows.iter().filter(|r| r.split(',').any(|f| f == video)).count(), 25);
        }
    }
    let series = read_ensemble_dir(dir.path()).unwrap();
    assert_eq!(series.len(), set.keypoints.len());
    for (k, s) in series.iter().enumerate() {
        assert_eq!(s.n_models(), 1);
        let m = summarize(s).unwrap();
        for (r, l) in set.labels.iter().enumerate() {
            for c in 0..m.median.ncols() {
                assert_eq!(m.median[(r, c)].to_bits(), l.coords[k][c].to_bits());
            }
        }
    }
}

#[test]
fn empty_pseudo_set_passes_ground_truth_through() {
    let (d, summaries) = data(&small(25, "v"));
    let pred = VideoPredictions::from_summaries("v", &summaries).unwrap();
    let sel = select_video(&pred, &config(100, 10, PoseSource::Triangulate(&d.rig))).unwrap();
    let gt = PseudoLabelSet::from_selection(&pred, &sel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let gt_dir = dir.path().join("gt");
    emit_pseudolabels(&gt, None, &gt_dir).unwrap();
    let read = read_labels(&gt_dir, "v").unwrap();
    let out = dir.path().join("out");
    emit_pseudolabels(&PseudoLabelSet::empty(read.keypoints.clone(), read.view_names.clone()), Some(&read), &out).unwrap();
    for view in &d.view_names {
        let a = std::fs::read_to_string(gt_dir.join(format!("{view}.csv"))).unwrap();
        let b = std::fs::read_to_string(out.join(format!("{view}.csv"))).unwrap();
        assert_eq!(a.replace(",pseudo", ",label"), b);
    }
}
