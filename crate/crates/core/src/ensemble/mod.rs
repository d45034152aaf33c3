//! Ensemble predictions for one keypoint and their per-cell median and variance.

pub mod table;

use nalgebra::{DMatrix, Point2};

use crate::calib::median_in_place;
use crate::error::{Error, Result};

pub use table::{format_f64, read_ensemble_dir, read_model_dir, KeypointTable};

/// Lower bound on every ensemble variance, in px^2.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Variance assigned to cells with fewer than two valid members, in px^2.
pub const VARIANCE_FLOOR_MISSING: f64 = 1e4;

/// Predictions `X~` of M models for one keypoint over T frames and V views.
///
/// The coordinate axis interleaves `[x_1, y_1, ..., x_V, y_V]`; missing
/// predictions are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    keypoint: String,
    view_names: Vec<String>,
    frame_index: Vec<i64>,
    n_models: usize,
    data: Vec<f64>,
}

impl EnsembleSeries {
    /// `data` is laid out frame-major, then coordinate, then model.
    pub fn new(
        keypoint: impl Into<String>,
        view_names: Vec<String>,
        frame_index: Vec<i64>,
        n_models: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let keypoint = keypoint.into();
        if frame_index.is_empty() {
            return Err(Error::Data(format!("keypoint {keypoint}: no frames")));
        }
        if view_names.len() < 2 {
            return Err(Error::Data(format!("keypoint {keypoint}: at least 2 views required")));
        }
        if n_models == 0 {
            return Err(Error::Data(format!("keypoint {keypoint}: at least 1 model required")));
        }
        let expect = frame_index.len() * 2 * view_names.len() * n_models;
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "keypoint {keypoint}: {} values for a {}x{}x{} tensor",
                data.len(),
                frame_index.len(),
                2 * view_names.len(),
                n_models
            )));
        }
        Ok(EnsembleSeries { keypoint, view_names, frame_index, n_models, data })
    }

    pub fn from_fn(
        keypoint: impl Into<String>,
        view_names: Vec<String>,
        frame_index: Vec<i64>,
        n_models: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (t_n, c_n) = (frame_index.len(), 2 * view_names.len());
        let mut data = Vec::with_capacity(t_n * c_n * n_models);
        for t in 0..t_n {
            for c in 0..c_n {
                for m in 0..n_models {
                    data.push(f(t, c, m));
                }
            }
        }
        Self::new(keypoint, view_names, frame_index, n_models, data)
    }

    pub fn keypoint(&self) -> &str {
        &self.keypoint
    }

    pub fn view_names(&self) -> &[String] {
        &self.view_names
    }

    pub fn frame_index(&self) -> &[i64] {
        &self.frame_index
    }

    pub fn n_frames(&self) -> usize {
        self.frame_index.len()
    }

    pub fn n_views(&self) -> usize {
        self.view_names.len()
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    #[inline]
    pub fn value(&self, t: usize, coord: usize, model: usize) -> f64 {
        self.data[(t * 2 * self.view_names.len() + coord) * self.n_models + model]
    }

    /// All members' values at one cell.
    pub fn members(&self, t: usize, coord: usize) -> &[f64] {
        let start = (t * 2 * self.view_names.len() + coord) * self.n_models;
        &self.data[start..start + self.n_models]
    }

    /// Predictions of a single ensemble member as a T x 2V matrix.
    pub fn member(&self, model: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_frames(), 2 * self.n_views(), |t, c| self.value(t, c, model))
    }

    /// Views reordered to `names` (which must be a permutation of the current views).
    pub fn reordered(&self, names: &[String]) -> Result<Self> {
        let idx = permutation(&self.view_names, names)?;
        Self::from_fn(self.keypoint.clone(), names.to_vec(), self.frame_index.clone(), self.n_models, |t, c, m| {
            self.value(t, 2 * idx[c / 2] + c % 2, m)
        })
    }
}

pub(crate) fn permutation(current: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    if current.len() != wanted.len() {
        return Err(Error::Config(format!("views {current:?} do not match {wanted:?}")));
    }
    wanted
        .iter()
        .map(|n| {
            current.iter().position(|c| c == n).ok_or_else(|| Error::Config(format!("view {n:?} not found in {current:?}")))
        })
        .collect()
}

/// Ensemble median `X`, variance `D` and standard deviation per cell, each T x 2V.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub keypoint: String,
    pub view_names: Vec<String>,
    pub frame_index: Vec<i64>,
    pub median: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub esd: DMatrix<f64>,
}

impl EnsembleSummary {
    pub fn n_frames(&self) -> usize {
        self.median.nrows()
    }

    pub fn n_views(&self) -> usize {
        self.view_names.len()
    }

    /// Copy with a replaced variance matrix (for example after inflation).
    pub fn with_variance(&self, variance: DMatrix<f64>) -> Self {
        let esd = variance.map(f64::sqrt);
        EnsembleSummary { variance, esd, ..self.clone() }
    }

    /// Median prediction of view `v` at frame `t`, `None` when missing.
    pub fn point(&self, t: usize, v: usize) -> Option<Point2<f64>> {
        let (x, y) = (self.median[(t, 2 * v)], self.median[(t, 2 * v + 1)]);
        (x.is_finite() && y.is_finite()).then(|| Point2::new(x, y))
    }

    /// Largest variance over all coordinates of frame `t`.
    pub fn max_variance(&self, t: usize) -> f64 {
        self.variance.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Median and unbiased variance over the valid members of every cell.
pub fn summarize(series: &EnsembleSeries) -> Result<EnsembleSummary> {
    let (t_n, c_n) = (series.n_frames(), 2 * series.n_views());
    let mut median = DMatrix::zeros(t_n, c_n);
    let mut variance = DMatrix::zeros(t_n, c_n);
    let mut buf = Vec::with_capacity(series.n_models());
    for t in 0..t_n {
        for c in 0..c_n {
            buf.clear();
            buf.extend(series.members(t, c).iter().copied().filter(|v| v.is_finite()));
            let n = buf.len();
            if n == 0 {
                return Err(Error::EmptyEnsemble { frame: t, coordinate: c });
            }
            let var = if n < 2 {
                VARIANCE_FLOOR_MISSING
            } else {
                let mean = buf.iter().sum::<f64>() / n as f64;
                buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
            };
            median[(t, c)] = median_in_place(&mut buf);
            variance[(t, c)] = var.max(VARIANCE_FLOOR);
        }
    }
    let esd = variance.map(f64::sqrt);
    Ok(EnsembleSummary {
        keypoint: series.keypoint().to_string(),
        view_names: series.view_names().to_vec(),
        frame_index: series.frame_index().to_vec(),
        median,
        variance,
        esd,
    })
}

/// T x V mask, true where `max(esd_x, esd_y)` of a view exceeds `threshold`.
pub fn esd_filter_mask(summary: &EnsembleSummary, threshold: f64) -> DMatrix<bool> {
    DMatrix::from_fn(summary.n_frames(), summary.n_views(), |t, v| {
        summary.esd[(t, 2 * v)].max(summary.esd[(t, 2 * v + 1)]) > threshold
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn single_member_gets_missing_floor() {
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0, 1, 2], 1, |t, c, _| (t * 10 + c) as f64).unwrap();
        let sum = summarize(&s).unwrap();
        assert_eq!(sum.median[(2, 3)], 23.0);
        assert!(sum.variance.iter().all(|&v| v == VARIANCE_FLOOR_MISSING));
    }

    #[test]
    fn hand_arithmetic_median_and_variance() {
        let vals = [1.0, 2.0, 9.0];
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0], 3, |_, _, m| vals[m]).unwrap();
        let sum = summarize(&s).unwrap();
        assert_eq!(sum.median[(0, 0)], 2.0);
        assert_eq!(sum.variance[(0, 0)], 19.0);
    }

    #[test]
    fn identical_members_hit_the_floor() {
        let s = EnsembleSeries::from_fn("kp", views(3), vec![0, 1], 4, |t, c, _| (t + c) as f64).unwrap();
        let sum = summarize(&s).unwrap();
        assert!(sum.variance.iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn missing_members_are_skipped() {
        let vals = [f64::NAN, 4.0, 6.0];
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0], 3, |_, _, m| vals[m]).unwrap();
        let sum = summarize(&s).unwrap();
        assert_eq!(sum.median[(0, 0)], 5.0);
        assert_eq!(sum.variance[(0, 0)], 2.0);

        let lone = [f64::NAN, 4.0, f64::NAN];
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0], 3, |_, _, m| lone[m]).unwrap();
        assert_eq!(summarize(&s).unwrap().variance[(0, 0)], VARIANCE_FLOOR_MISSING);
    }

    #[test]
    fn all_missing_cell_is_an_error() {
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0, 1], 2, |t, c, _| {
            if t == 1 && c == 2 {
                f64::NAN
            } else {
                1.0
            }
        })
        .unwrap();
        assert!(matches!(summarize(&s), Err(Error::EmptyEnsemble { frame: 1, coordinate: 2 })));
    }

    #[test]
    fn esd_mask_thresholds() {
        let s = EnsembleSeries::from_fn("kp", views(2), vec![0, 1], 3, |t, c, m| (t * c * m) as f64).unwrap();
        let sum = summarize(&s).unwrap();
        assert!(esd_filter_mask(&sum, 0.0).iter().all(|&b| b));
        assert!(esd_filter_mask(&sum, f64::INFINITY).iter().all(|&b| !b));
        let mask = esd_filter_mask(&sum, 0.5);
        assert!(!mask[(0, 0)] && mask[(1, 1)]);
    }

    #[test]
    fn reorder_views() {
        let s = EnsembleSeries::from_fn("kp", views(3), vec![0], 1, |_, c, _| c as f64).unwrap();
        let names = vec!["v2".to_string(), "v0".to_string(), "v1".to_string()];
        let r = s.reordered(&names).unwrap();
        assert_eq!(r.members(0, 0), &[4.0]);
        assert_eq!(r.members(0, 3), &[1.0]);
        assert!(s.reordered(&["v0".to_string(), "v9".to_string(), "v1".to_string()]).is_err());
    }

    #[test]
    fn invalid_shapes() {
        assert!(EnsembleSeries::new("kp", views(1), vec![0], 1, vec![0.0, 0.0]).is_err());
        assert!(EnsembleSeries::new("kp", views(2), vec![0], 1, vec![0.0; 3]).is_err());
        assert!(EnsembleSeries::new("kp", views(2), vec![], 1, vec![]).is_err());
    }
}
