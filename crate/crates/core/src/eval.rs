//! Pixel error stratified by ensemble standard deviation, and 3D
//! reprojection error.

use nalgebra::{DMatrix, DVector, Point2};
use serde::{Deserialize, Serialize};

use crate::calib::{triangulate_median, Rig};
use crate::error::{Error, Result};
use crate::linear::Pca;

/// How a keypoint-view's e.s.d. is formed from its two coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EsdPooling {
    /// One entry per keypoint-view: Euclidean error, `max(esd_x, esd_y)`.
    #[default]
    Max,
    /// One entry per coordinate: absolute error and that coordinate's e.s.d.
    PerCoordinate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCurve {
    pub thresholds: Vec<f64>,
    /// `None` where no entry exceeds the threshold.
    pub mean_error: Vec<Option<f64>>,
    pub fraction_included: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Per-entry `(error, esd)` pairs over aligned T x 2V matrices; entries with a
/// missing prediction, truth or e.s.d. are skipped.
pub fn error_entries(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    esd: &DMatrix<f64>,
    pooling: EsdPooling,
) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != truth.shape() || pred.shape() != esd.shape() || pred.ncols() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, truth {:?}, esd {:?}",
            pred.shape(),
            truth.shape(),
            esd.shape()
        )));
    }
    let mut out = Vec::new();
    for t in 0..pred.nrows() {
        for v in 0..pred.ncols() / 2 {
            let (cx, cy) = (2 * v, 2 * v + 1);
            let vals = [pred[(t, cx)], pred[(t, cy)], truth[(t, cx)], truth[(t, cy)], esd[(t, cx)], esd[(t, cy)]];
            if vals.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let (dx, dy) = (pred[(t, cx)] - truth[(t, cx)], pred[(t, cy)] - truth[(t, cy)]);
            match pooling {
                EsdPooling::Max => out.push((dx.hypot(dy), esd[(t, cx)].max(esd[(t, cy)]))),
                EsdPooling::PerCoordinate => {
                    out.push((dx.abs(), esd[(t, cx)]));
                    out.push((dy.abs(), esd[(t, cy)]));
                }
            }
        }
    }
    Ok(out)
}

/// Mean error over entries with e.s.d. strictly above each threshold.
pub fn error_curve(entries: &[(f64, f64)], thresholds: &[f64]) -> Result<ErrorCurve> {
    if thresholds.iter().any(|&t| !(t >= 0.0)) || thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("thresholds must be non-negative and strictly ascending".into()));
    }
    let total = entries.len();
    let mut curve = ErrorCurve { thresholds: thresholds.to_vec(), mean_error: vec![], fraction_included: vec![], counts: vec![] };
    for &th in thresholds {
        let (sum, n) = entries.iter().filter(|(_, s)| *s > th).fold((0.0, 0usize), |(a, n), (e, _)| (a + e, n + 1));
        curve.mean_error.push((n > 0).then(|| sum / n as f64));
        curve.fraction_included.push(if total > 0 { n as f64 / total as f64 } else { 0.0 });
        curve.counts.push(n);
    }
    Ok(curve)
}

/// [`error_curve`] pooled over several keypoints' T x 2V matrices.
pub fn error_vs_esd(
    pred: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    esd: &[DMatrix<f64>],
    thresholds: &[f64],
    pooling: EsdPooling,
) -> Result<ErrorCurve> {
    if pred.len() != truth.len() || pred.len() != esd.len() {
        return Err(Error::ShapeMismatch(format!("{} / {} / {} keypoints", pred.len(), truth.len(), esd.len())));
    }
    let mut entries = Vec::new();
    for ((p, t), s) in pred.iter().zip(truth).zip(esd) {
        entries.extend(error_entries(p, t, s, pooling)?);
    }
    error_curve(&entries, thresholds)
}

/// Euclidean pixel error per (frame, view); NaN where either side is missing.
pub fn pixel_errors(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pred.shape() != truth.shape() || pred.ncols() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("prediction {:?}, truth {:?}", pred.shape(), truth.shape())));
    }
    Ok(DMatrix::from_fn(pred.nrows(), pred.ncols() / 2, |t, v| {
        (pred[(t, 2 * v)] - truth[(t, 2 * v)]).hypot(pred[(t, 2 * v + 1)] - truth[(t, 2 * v + 1)])
    }))
}

/// Mean of the finite entries, `None` when there are none.
pub fn finite_mean<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<f64> {
    let (s, n) = values.into_iter().filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Triangulate one frame, reproject, and average the per-view pixel residual.
pub fn reprojection_error_frame(rig: &Rig<f64>, points: &[Option<Point2<f64>>]) -> Result<f64> {
    let p = triangulate_median(rig, points)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (cam, q) in rig.cameras().iter().zip(points) {
        if let Some(q) = q {
            let r = cam.project(&p)?;
            sum += (r - q).norm();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

fn frame_points(pred: &DMatrix<f64>, t: usize) -> Vec<Option<Point2<f64>>> {
    (0..pred.ncols() / 2)
        .map(|v| {
            let (x, y) = (pred[(t, 2 * v)], pred[(t, 2 * v + 1)]);
            (x.is_finite() && y.is_finite()).then(|| Point2::new(x, y))
        })
        .collect()
}

/// Calibrated reprojection error of every frame of a T x 2V prediction;
/// NaN where fewer than two views are valid or the geometry is degenerate.
pub fn reprojection_error_3d(rig: &Rig<f64>, pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pred.ncols() != 2 * rig.len() {
        return Err(Error::ShapeMismatch(format!("{} columns for {} cameras", pred.ncols(), rig.len())));
    }
    (0..pred.nrows())
        .map(|t| match reprojection_error_frame(rig, &frame_points(pred, t)) {
            Ok(e) => Ok(e),
            Err(Error::InsufficientViews { .. } | Error::DegenerateGeometry(_) | Error::NonPositiveDepth { .. }) => {
                Ok(f64::NAN)
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Uncalibrated variant: residual of each frame from its projection onto the
/// top-`d` PCA subspace, averaged over views.
pub fn pca_reprojection_error(pca: &Pca, d: usize, pred: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pred.ncols() != pca.mean.len() {
        return Err(Error::ShapeMismatch(format!("{} columns for a {}-dim PCA", pred.ncols(), pca.mean.len())));
    }
    let w = pca.loadings(d);
    Ok((0..pred.nrows())
        .map(|t| {
            let x: DVector<f64> = pred.row(t).transpose();
            if x.iter().any(|v| !v.is_finite()) {
                return f64::NAN;
            }
            let c = &x - &pca.mean;
            let r = &c - &w * w.tr_mul(&c);
            let v_n = r.len() / 2;
            (0..v_n).map(|v| r[2 * v].hypot(r[2 * v + 1])).sum::<f64>() / v_n as f64
        })
        .collect())
}
