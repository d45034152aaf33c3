//! Pseudo-label frame selection: keep the lowest-variance frames, cluster them
//! in 3D pose space and take the frame nearest each cluster center.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{median_in_place, triangulate_median, Rig};
use crate::ensemble::{EnsembleSummary, KeypointTable};
use crate::error::{Error, Result};
use crate::linear::Pca;
use crate::smoothing::SmoothedTrack;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;
pub const DEFAULT_SEED: u64 = 0;
pub const POSE_PCA_DIM: usize = 3;

/// Recording setups with an established quality-filter size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigProfile {
    /// Short multi-camera videos of small animals.
    #[default]
    Fly,
    /// Long two-camera recordings.
    Mouse,
    Chickadee,
}

impl RigProfile {
    pub fn default_nf(self) -> usize {
        match self {
            RigProfile::Fly => 450,
            RigProfile::Mouse => 21000,
            RigProfile::Chickadee => 1200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub video: String,
    pub frame: i64,
    pub sigma2_max: f64,
}

fn score_order(a: &FrameScore, b: &FrameScore) -> std::cmp::Ordering {
    a.sigma2_max.total_cmp(&b.sigma2_max).then_with(|| a.video.cmp(&b.video)).then(a.frame.cmp(&b.frame))
}

/// The `nf` frames with smallest `sigma2_max`, ties broken by (video, frame).
pub fn quality_filter(scores: &[FrameScore], nf: usize) -> Vec<FrameScore> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(score_order);
    sorted.truncate(nf);
    sorted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelSource {
    #[default]
    Eks,
    EnsembleMedian,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Eks => "eks",
            LabelSource::EnsembleMedian => "ensemble_median",
        })
    }
}

/// All keypoints of one video: per keypoint a T x 2V coordinate matrix and the
/// matching variances.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPredictions {
    pub video: String,
    pub frame_index: Vec<i64>,
    pub view_names: Vec<String>,
    pub keypoints: Vec<String>,
    pub means: Vec<DMatrix<f64>>,
    pub vars: Vec<DMatrix<f64>>,
    pub source: LabelSource,
}

impl VideoPredictions {
    pub fn from_tracks(video: impl Into<String>, tracks: &[SmoothedTrack]) -> Result<Self> {
        let first = tracks.first().ok_or_else(|| Error::Data("no keypoints".into()))?;
        for t in tracks {
            if t.frame_index != first.frame_index || t.view_names != first.view_names {
                return Err(Error::ShapeMismatch(format!("keypoint {} is not aligned with {}", t.keypoint, first.keypoint)));
            }
        }
        Ok(VideoPredictions {
            video: video.into(),
            frame_index: first.frame_index.clone(),
            view_names: first.view_names.clone(),
            keypoints: tracks.iter().map(|t| t.keypoint.clone()).collect(),
            means: tracks.iter().map(|t| t.means.clone()).collect(),
            vars: tracks.iter().map(|t| t.pred_vars.clone()).collect(),
            source: LabelSource::Eks,
        })
    }

    pub fn from_summaries(video: impl Into<String>, summaries: &[EnsembleSummary]) -> Result<Self> {
        let first = summaries.first().ok_or_else(|| Error::Data("no keypoints".into()))?;
        for s in summaries {
            if s.frame_index != first.frame_index || s.view_names != first.view_names {
                return Err(Error::ShapeMismatch(format!("keypoint {} is not aligned with {}", s.keypoint, first.keypoint)));
            }
        }
        Ok(VideoPredictions {
            video: video.into(),
            frame_index: first.frame_index.clone(),
            view_names: first.view_names.clone(),
            keypoints: summaries.iter().map(|s| s.keypoint.clone()).collect(),
            means: summaries.iter().map(|s| s.median.clone()).collect(),
            vars: summaries.iter().map(|s| s.variance.clone()).collect(),
            source: LabelSource::EnsembleMedian,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frame_index.len()
    }

    /// `max_{k,v} {sigma2_x, sigma2_y}` per frame; non-finite variances count as infinite.
    pub fn scores(&self) -> Vec<FrameScore> {
        (0..self.n_frames())
            .map(|t| {
                let s = self.vars.iter().flat_map(|m| m.row(t).iter().copied().collect::<Vec<_>>()).fold(
                    f64::NEG_INFINITY,
                    |a, v| if v.is_finite() { a.max(v) } else { f64::INFINITY },
                );
                FrameScore { video: self.video.clone(), frame: self.frame_index[t], sigma2_max: s }
            })
            .collect()
    }

    fn row_of(&self, frame: i64) -> Option<usize> {
        self.frame_index.iter().position(|&f| f == frame)
    }
}

/// How 3D pose vectors are obtained.
#[derive(Debug, Clone, Copy)]
pub enum PoseSource<'a> {
    Triangulate(&'a Rig<f64>),
    /// One PCA fitted on every keypoint's 2V rows.
    Pca,
}

/// Per-frame pose vectors (T x 3K), optionally centered on the per-frame
/// component-wise median over keypoints.
pub fn pose_vectors(pred: &VideoPredictions, source: PoseSource<'_>, median_center: bool) -> Result<DMatrix<f64>> {
    let all: Vec<usize> = (0..pred.n_frames()).collect();
    pose_vectors_at(pred, source, median_center, &all)
}

/// [`pose_vectors`] of the given frame rows only, one output row per entry.
pub fn pose_vectors_at(
    pred: &VideoPredictions,
    source: PoseSource<'_>,
    median_center: bool,
    frame_rows: &[usize],
) -> Result<DMatrix<f64>> {
    let (t_n, k_n) = (frame_rows.len(), pred.keypoints.len());
    if let Some(&bad) = frame_rows.iter().find(|&&r| r >= pred.n_frames()) {
        return Err(Error::ShapeMismatch(format!("frame row {bad} out of range for {} frames", pred.n_frames())));
    }
    let mut poses = DMatrix::from_element(t_n, 3 * k_n, f64::NAN);
    match source {
        PoseSource::Triangulate(rig) => {
            if rig.len() != pred.view_names.len() {
                return Err(Error::ShapeMismatch(format!("rig has {} cameras, data {} views", rig.len(), pred.view_names.len())));
            }
            for (k, m) in pred.means.iter().enumerate() {
                for (t, &row) in frame_rows.iter().enumerate() {
                    let pts: Vec<_> = (0..rig.len())
                        .map(|v| {
                            let (x, y) = (m[(row, 2 * v)], m[(row, 2 * v + 1)]);
                            (x.is_finite() && y.is_finite()).then(|| nalgebra::Point2::new(x, y))
                        })
                        .collect();
                    match triangulate_median(rig, &pts) {
                        Ok(p) => {
                            for c in 0..3 {
                                poses[(t, 3 * k + c)] = p[c];
                            }
                        }
                        Err(Error::InsufficientViews { .. } | Error::DegenerateGeometry(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        PoseSource::Pca => {
            let rows: Vec<_> = pred
                .means
                .iter()
                .flat_map(|m| m.row_iter().filter(|r| r.iter().all(|v| v.is_finite())).map(|r| r.into_owned()))
                .collect();
            if rows.len() < 2 {
                return Err(Error::Data("too few complete rows for pose PCA".into()));
            }
            let pca = Pca::fit(&DMatrix::from_rows(&rows))?;
            let w = pca.loadings(POSE_PCA_DIM.min(pca.mean.len()));
            for (k, m) in pred.means.iter().enumerate() {
                for (t, &row) in frame_rows.iter().enumerate() {
                    let x = m.row(row).transpose();
                    if x.iter().all(|v| v.is_finite()) {
                        let z = w.tr_mul(&(x - &pca.mean));
                        for c in 0..z.len() {
                            poses[(t, 3 * k + c)] = z[c];
                        }
                        for c in z.len()..3 {
                            poses[(t, 3 * k + c)] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let mut buf = Vec::with_capacity(k_n);
    for t in 0..t_n {
        for c in 0..3 {
            buf.clear();
            buf.extend((0..k_n).map(|k| poses[(t, 3 * k + c)]).filter(|v| v.is_finite()));
            let center = if buf.is_empty() { 0.0 } else { median_in_place(&mut buf) };
            for k in 0..k_n {
                let v = &mut poses[(t, 3 * k + c)];
                if !v.is_finite() {
                    *v = center;
                }
                if median_center {
                    *v -= center;
                }
            }
        }
    }
    Ok(poses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: DMatrix<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, j: usize) -> f64 {
    points.row(i).iter().zip(centers.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Lloyd's algorithm from a k-means++ initialization drawn with a seeded
/// ChaCha8 generator. Empty clusters keep their previous center.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let (n, p) = points.shape();
    if k == 0 || n < k {
        return Err(Error::TooFewFrames { frames: n, clusters: k });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::zeros(k, p);
    centers.row_mut(0).copy_from(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, &centers, c));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    for it in 1..=KMEANS_MAX_ITER {
        iterations = it;
        for (i, a) in assignments.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let d = sq_dist(points, i, &centers, j);
                if d < best.0 {
                    best = (d, j);
                }
            }
            *a = best.1;
        }
        let mut sums = DMatrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += points.row(i);
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = sums.row(j) / counts[j] as f64;
            shift = shift.max((&new - centers.row(j)).norm());
            centers.row_mut(j).copy_from(&new);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(KMeans { centers, assignments, iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub video: String,
    pub frame: i64,
    pub cluster: Option<usize>,
    pub sigma2_max: f64,
}

/// One frame per non-empty cluster: the member closest to its center.
/// `poses` rows align with `frames`.
pub fn diversity_select(frames: &[FrameScore], poses: &DMatrix<f64>, nv: usize, seed: u64) -> Result<Vec<Selection>> {
    if poses.nrows() != frames.len() {
        return Err(Error::ShapeMismatch(format!("{} pose rows for {} frames", poses.nrows(), frames.len())));
    }
    if frames.len() < nv {
        return Err(Error::TooFewFrames { frames: frames.len(), clusters: nv });
    }
    let km = kmeans(poses, nv, seed)?;
    let mut out = Vec::new();
    for j in 0..nv {
        let best = (0..frames.len())
            .filter(|&i| km.assignments[i] == j)
            .map(|i| (sq_dist(poses, i, &km.centers, j), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, i)) = best {
            out.push(Selection {
                video: frames[i].video.clone(),
                frame: frames[i].frame,
                cluster: Some(j),
                sigma2_max: frames[i].sigma2_max,
            });
        }
    }
    Ok(out)
}

/// `nv` distinct frames drawn uniformly with a seeded generator.
pub fn random_select(frames: &[FrameScore], nv: usize, seed: u64) -> Vec<Selection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    let take = nv.min(idx.len());
    for i in 0..take {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..take].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| Selection { video: frames[i].video.clone(), frame: frames[i].frame, cluster: None, sigma2_max: frames[i].sigma2_max })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Targeted,
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct SelectConfig<'a> {
    pub nf: usize,
    pub nv: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub pose: PoseSource<'a>,
    pub median_center: bool,
}

/// Quality filter then diversity selection within one video.
pub fn select_video(pred: &VideoPredictions, cfg: &SelectConfig<'_>) -> Result<Vec<Selection>> {
    let scores = pred.scores();
    match cfg.strategy {
        Strategy::Random => Ok(random_select(&scores, cfg.nv, cfg.seed)),
        Strategy::Targeted => {
            let kept = quality_filter(&scores, cfg.nf);
            if kept.len() < cfg.nv {
                return Err(Error::TooFewFrames { frames: kept.len(), clusters: cfg.nv });
            }
            let rows: Vec<usize> = kept.iter().map(|s| pred.row_of(s.frame).expect("scored frame")).collect();
            let poses = pose_vectors_at(pred, cfg.pose, cfg.median_center, &rows)?;
            let mut sel = diversity_select(&kept, &poses, cfg.nv, cfg.seed)?;
            sel.sort_by(|a, b| a.video.cmp(&b.video).then(a.frame.cmp(&b.frame)));
            Ok(sel)
        }
    }
}

/// One labeled frame: coordinates per keypoint per view, `[kp][x_1, y_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub video: String,
    pub frame: i64,
    pub cluster: Option<usize>,
    pub sigma2_max: f64,
    pub coords: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub keypoints: Vec<String>,
    pub view_names: Vec<String>,
    pub source: LabelSource,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn empty(keypoints: Vec<String>, view_names: Vec<String>) -> Self {
        PseudoLabelSet { keypoints, view_names, source: LabelSource::Eks, labels: Vec::new() }
    }

    pub fn from_selection(pred: &VideoPredictions, selection: &[Selection]) -> Result<Self> {
        let labels = selection
            .iter()
            .map(|s| {
                let t = pred
                    .row_of(s.frame)
                    .ok_or_else(|| Error::Data(format!("frame {} not in video {}", s.frame, pred.video)))?;
                Ok(PseudoLabel {
                    video: s.video.clone(),
                    frame: s.frame,
                    cluster: s.cluster,
                    sigma2_max: s.sigma2_max,
                    coords: pred.means.iter().map(|m| m.row(t).transpose()).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PseudoLabelSet { keypoints: pred.keypoints.clone(), view_names: pred.view_names.clone(), source: pred.source, labels })
    }

    pub fn extend(&mut self, other: PseudoLabelSet) -> Result<()> {
        if other.keypoints != self.keypoints || other.view_names != self.view_names {
            return Err(Error::ShapeMismatch("pseudo-label sets have different keypoints or views".into()));
        }
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Ground-truth labels read from per-view CSVs (`frame`, optional `video`,
/// `<kp>_x`, `<kp>_y`).
pub fn read_labels(dir: &Path, default_video: &str) -> Result<PseudoLabelSet> {
    let tables = crate::ensemble::read_model_dir(dir)?;
    let view_names: Vec<String> = tables.iter().map(|(v, _)| v.clone()).collect();
    let first = &tables[0].1;
    let keypoints = first.keypoints();
    let videos: Vec<String> = first
        .text("video")
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![default_video.to_string(); first.n_rows()]);
    for (v, t) in &tables {
        if t.frames != first.frames {
            return Err(Error::Data(format!("{}: frames of view {v} differ", dir.display())));
        }
    }
    let mut labels = Vec::with_capacity(first.n_rows());
    for r in 0..first.n_rows() {
        let coords = keypoints
            .iter()
            .map(|kp| {
                let mut c = DVector::zeros(2 * tables.len());
                for (v, (name, t)) in tables.iter().enumerate() {
                    let path = dir.join(format!("{name}.csv"));
                    c[2 * v] = t.require(&format!("{kp}_x"), &path)?[r];
                    c[2 * v + 1] = t.require(&format!("{kp}_y"), &path)?[r];
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        labels.push(PseudoLabel { video: videos[r].clone(), frame: first.frames[r], cluster: None, sigma2_max: 0.0, coords });
    }
    Ok(PseudoLabelSet { keypoints, view_names, source: LabelSource::Eks, labels })
}

/// Writes `<dir>/<view>.csv` holding ground truth (provenance `label`)
/// followed by pseudo-labels (provenance `pseudo`).
pub fn emit_pseudolabels(set: &PseudoLabelSet, ground_truth: Option<&PseudoLabelSet>, dir: &Path) -> Result<()> {
    let empty = PseudoLabelSet::empty(set.keypoints.clone(), set.view_names.clone());
    let gt = ground_truth.unwrap_or(&empty);
    if gt.keypoints != set.keypoints || gt.view_names != set.view_names {
        return Err(Error::ShapeMismatch(format!(
            "ground truth has keypoints {:?} / views {:?}, pseudo-labels {:?} / {:?}",
            gt.keypoints, gt.view_names, set.keypoints, set.view_names
        )));
    }
    let mut seen: HashSet<(&str, i64)> = HashSet::new();
    for l in gt.labels.iter().chain(&set.labels) {
        if !seen.insert((l.video.as_str(), l.frame)) {
            return Err(Error::Collision { video: l.video.clone(), frame: l.frame });
        }
    }
    let rows: Vec<(&PseudoLabel, &str)> =
        gt.labels.iter().map(|l| (l, "label")).chain(set.labels.iter().map(|l| (l, "pseudo"))).collect();
    for (v, view) in set.view_names.iter().enumerate() {
        let mut table = KeypointTable::new(rows.iter().map(|(l, _)| l.frame).collect());
        for (k, kp) in set.keypoints.iter().enumerate() {
            table.push_numeric(format!("{kp}_x"), rows.iter().map(|(l, _)| l.coords[k][2 * v]).collect())?;
            table.push_numeric(format!("{kp}_y"), rows.iter().map(|(l, _)| l.coords[k][2 * v + 1]).collect())?;
        }
        table.push_text("video", rows.iter().map(|(l, _)| l.video.clone()).collect())?;
        table.push_text("provenance", rows.iter().map(|(_, p)| p.to_string()).collect())?;
        table.write(&dir.join(format!("{view}.csv")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(video: &str, frame: i64, s: f64) -> FrameScore {
        FrameScore { video: video.into(), frame, sigma2_max: s }
    }

    #[test]
    fn quality_filter_ties_by_video_then_frame() {
        let scores = vec![score("b", 1, 1.0), score("a", 5, 1.0), score("a", 2, 1.0), score("c", 0, 0.5)];
        let kept = quality_filter(&scores, 3);
        let ids: Vec<_> = kept.iter().map(|s| (s.video.as_str(), s.frame)).collect();
        assert_eq!(ids, vec![("c", 0), ("a", 2), ("a", 5)]);
        assert_eq!(quality_filter(&scores, 10).len(), 4);
    }

    #[test]
    fn separated_blobs_get_one_pick_each() {
        let pts = DMatrix::from_fn(20, 2, |i, j| if i < 10 { (i + j) as f64 * 0.01 } else { 100.0 + (i * j) as f64 * 0.01 });
        let frames: Vec<_> = (0..20).map(|i| score("v", i, 0.0)).collect();
        let sel = diversity_select(&frames, &pts, 2, 0).unwrap();
        assert_eq!(sel.len(), 2);
        assert!(sel.iter().any(|s| s.frame < 10) && sel.iter().any(|s| s.frame >= 10));
    }

    #[test]
    fn every_frame_when_nv_equals_count() {
        let pts = DMatrix::from_fn(7, 3, |i, j| (i * 3 + j) as f64);
        let frames: Vec<_> = (0..7).map(|i| score("v", i, 0.0)).collect();
        let sel = diversity_select(&frames, &pts, 7, 3).unwrap();
        assert_eq!(sel.len(), 7);
        assert!(matches!(diversity_select(&frames, &pts, 8, 0), Err(Error::TooFewFrames { frames: 7, clusters: 8 })));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts = DMatrix::from_fn(200, 4, |i, j| ((i * 31 + j * 17) % 23) as f64);
        assert_eq!(kmeans(&pts, 5, 42).unwrap(), kmeans(&pts, 5, 42).unwrap());
        assert_eq!(random_select(&(0..50).map(|i| score("v", i, 0.0)).collect::<Vec<_>>(), 5, 1).len(), 5);
    }

    #[test]
    fn collisions_are_rejected() {
        let coords = vec![DVector::from_element(4, 1.0)];
        let label = |frame| PseudoLabel { video: "v".into(), frame, cluster: None, sigma2_max: 0.0, coords: coords.clone() };
        let names = (vec!["k".to_string()], vec!["a".to_string(), "b".to_string()]);
        let mut set = PseudoLabelSet::empty(names.0.clone(), names.1.clone());
        set.labels.push(label(3));
        let mut gt = PseudoLabelSet::empty(names.0, names.1);
        gt.labels.push(label(3));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_pseudolabels(&set, Some(&gt), dir.path()), Err(Error::Collision { frame: 3, .. })));
    }
}
