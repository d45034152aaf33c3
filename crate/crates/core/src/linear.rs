//! Linear multi-view smoother: PCA observation model, smoothing-parameter
//! search and posterior predictive outputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::smoothing::{select_smoothing, Smoothing, SmoothedTrack, SmoothingFit};
use crate::ssm::{kalman_log_likelihood, kalman_smooth, Lgssm};

/// Cumulative explained variance the automatic latent dimension must reach.
pub const EXPLAINED_TARGET: f64 = 0.99;
pub const DEFAULT_QUANTILE: f64 = 0.5;
pub const E_REGULARIZATION: f64 = 1e-8;
pub const INITIAL_COV_SCALE: f64 = 1e2;

/// Written as an integer or `"auto-99"` in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "DimRepr", into = "DimRepr")]
pub enum LatentDim {
    Fixed(usize),
    /// Smallest `d` reaching [`EXPLAINED_TARGET`].
    #[default]
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DimRepr {
    Fixed(usize),
    Named(String),
}

impl TryFrom<DimRepr> for LatentDim {
    type Error = String;

    fn try_from(r: DimRepr) -> std::result::Result<Self, String> {
        match r {
            DimRepr::Fixed(0) => Err("latent dimension must be at least 1".into()),
            DimRepr::Fixed(d) => Ok(LatentDim::Fixed(d)),
            DimRepr::Named(s) if s == "auto-99" || s == "auto" => Ok(LatentDim::Auto),
            DimRepr::Named(s) => Err(format!("latent dimension {s:?}: expected an integer or \"auto-99\"")),
        }
    }
}

impl From<LatentDim> for DimRepr {
    fn from(d: LatentDim) -> Self {
        match d {
            LatentDim::Fixed(d) => DimRepr::Fixed(d),
            LatentDim::Auto => DimRepr::Named("auto-99".into()),
        }
    }
}

impl std::str::FromStr for LatentDim {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<usize>() {
            Ok(d) => DimRepr::Fixed(d).try_into(),
            Err(_) => DimRepr::Named(s.to_string()).try_into(),
        }
    }
}

/// Principal components of a set of rows, sorted by decreasing variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Orthonormal components as columns, n x n.
    pub components: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

impl Pca {
    pub fn fit(rows: &DMatrix<f64>) -> Result<Self> {
        let (t_n, n) = rows.shape();
        if t_n < 2 || n == 0 {
            return Err(Error::Data(format!("PCA needs at least 2 rows, got {t_n}")));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("PCA input contains non-finite values".into()));
        }
        let mean = DVector::from_fn(n, |j, _| rows.column(j).mean());
        let mut centered = rows.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / (t_n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = DMatrix::zeros(n, n);
        let mut eigenvalues = DVector::zeros(n);
        for (k, &i) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(i).into_owned();
            let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                col.neg_mut();
            }
            components.set_column(k, &col);
            eigenvalues[k] = eig.eigenvalues[i].max(0.0);
        }
        Ok(Pca { mean, components, eigenvalues })
    }

    /// Cumulative explained-variance ratio for `d = 1..=n`.
    pub fn explained(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.sum();
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|&l| {
                acc += l;
                if total > 0.0 {
                    (acc / total).min(1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }

    pub fn auto_dim(&self, target: f64) -> usize {
        let ex = self.explained();
        ex.iter().position(|&r| r >= target - 1e-12).map_or(ex.len(), |i| i + 1)
    }

    pub fn loadings(&self, d: usize) -> DMatrix<f64> {
        self.components.columns(0, d).into_owned()
    }
}

/// `W`, `mu_x`, `E` and `s` of one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObsModel {
    /// 2V x d.
    pub w: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub e: DMatrix<f64>,
    pub s: f64,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
    /// Cumulative explained-variance ratios of the fitted PCA.
    pub explained: Vec<f64>,
    pub frames_used: usize,
}

impl LinearObsModel {
    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn to_lgssm(&self, obs_var: &DMatrix<f64>) -> Lgssm<f64> {
        Lgssm {
            initial_mean: self.initial_mean.clone(),
            initial_cov: self.initial_cov.clone(),
            dynamics_base: self.e.clone(),
            smoothing: self.s,
            obs_map: self.w.clone(),
            obs_offset: self.mu.clone(),
            obs_var: obs_var.clone(),
        }
    }

    /// `W^T (x - mu)`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.w.tr_mul(&(x - &self.mu))
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.w * z + &self.mu
    }

    pub fn with_smoothing(&self, s: f64) -> Self {
        LinearObsModel { s, ..self.clone() }
    }
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Rows of `frames` that pass the low-variance filter, as a matrix.
fn low_variance_rows(summary: &EnsembleSummary, q: f64) -> (DMatrix<f64>, usize) {
    let t_n = summary.n_frames();
    let maxvar: Vec<f64> = (0..t_n).map(|t| summary.max_variance(t)).collect();
    let cut = quantile(&maxvar, q);
    let keep: Vec<usize> = (0..t_n)
        .filter(|&t| maxvar[t] <= cut && summary.median.row(t).iter().all(|v| v.is_finite()))
        .collect();
    let rows = DMatrix::from_fn(keep.len(), summary.median.ncols(), |r, c| summary.median[(keep[r], c)]);
    (rows, keep.len())
}

/// PCA on the low-variance frames of `summary`.
pub fn fit_pca(summary: &EnsembleSummary, q: f64) -> Result<Pca> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("variance quantile {q} must lie in (0, 1]")));
    }
    let (rows, _) = low_variance_rows(summary, q);
    Pca::fit(&rows)
}

/// Initializes `W`, `mu_x` and `E` from the frames whose largest ensemble
/// variance is at most the `q`-quantile; `s = 1`.
pub fn fit_params(summary: &EnsembleSummary, dim: LatentDim, q: f64) -> Result<LinearObsModel> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("variance quantile {q} must lie in (0, 1]")));
    }
    let n = summary.median.ncols();
    let (rows, found) = low_variance_rows(summary, q);
    if let LatentDim::Fixed(d) = dim {
        if d == 0 || d > n {
            return Err(Error::Config(format!("latent dimension {d} must lie in 1..={n}")));
        }
        if found < d + 2 {
            return Err(Error::InsufficientLowVarianceFrames { found, required: d + 2 });
        }
    }
    if found < 3 {
        return Err(Error::InsufficientLowVarianceFrames { found, required: 3 });
    }
    let pca = Pca::fit(&rows)?;
    let d = match dim {
        LatentDim::Fixed(d) => d,
        LatentDim::Auto => pca.auto_dim(EXPLAINED_TARGET),
    };
    if found < d + 2 {
        return Err(Error::InsufficientLowVarianceFrames { found, required: d + 2 });
    }
    let w = pca.loadings(d);
    let mu = pca.mean.clone();

    let proj: Vec<Option<DVector<f64>>> = summary
        .median
        .row_iter()
        .map(|r| {
            let x = r.transpose();
            x.iter().all(|v| v.is_finite()).then(|| w.tr_mul(&(x - &mu)))
        })
        .collect();
    let diffs: Vec<DVector<f64>> = proj
        .windows(2)
        .filter_map(|p| match (&p[0], &p[1]) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        })
        .collect();
    if diffs.is_empty() {
        return Err(Error::InsufficientLowVarianceFrames { found: 0, required: 2 });
    }
    let e = covariance(&diffs) + DMatrix::identity(d, d) * E_REGULARIZATION;
    let initial_mean = proj.iter().flatten().next().cloned().unwrap_or_else(|| DVector::zeros(d));
    Ok(LinearObsModel {
        w,
        mu,
        e,
        s: 1.0,
        initial_mean,
        initial_cov: DMatrix::identity(d, d) * INITIAL_COV_SCALE,
        explained: pca.explained(),
        frames_used: found,
    })
}

/// Unbiased sample covariance of a set of vectors.
pub(crate) fn covariance(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let d = xs[0].len();
    let n = xs.len();
    let mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov / (n.max(2) - 1) as f64
}

/// Chooses `s` for the observation variances in `summary`.
pub fn optimize_smoothing(model: &LinearObsModel, summary: &EnsembleSummary, mode: Smoothing) -> Result<SmoothingFit> {
    let mut lg = model.to_lgssm(&summary.variance);
    select_smoothing(mode, model.s, |s| {
        lg.smoothing = s;
        kalman_log_likelihood(&lg, &summary.median)
    })
}

/// Runs the smoother with `model.s` and the (possibly inflated) variances of
/// `summary`.
pub fn smooth(model: &LinearObsModel, summary: &EnsembleSummary) -> Result<SmoothedTrack> {
    let lg = model.to_lgssm(&summary.variance);
    let post = kalman_smooth(&lg, &summary.median)?;
    let (t_n, n) = summary.median.shape();
    let mut means = DMatrix::zeros(t_n, n);
    let mut pred_vars = DMatrix::zeros(t_n, n);
    for t in 0..t_n {
        let z = &post.smoothed_means[t];
        let p = &post.smoothed_covs[t];
        means.row_mut(t).copy_from(&model.reconstruct(z).transpose());
        let wp = &model.w * p;
        for i in 0..n {
            pred_vars[(t, i)] = wp.row(i).dot(&model.w.row(i)) + summary.variance[(t, i)];
        }
    }
    Ok(SmoothedTrack {
        keypoint: summary.keypoint.clone(),
        view_names: summary.view_names.clone(),
        frame_index: summary.frame_index.clone(),
        means,
        pred_vars,
        latent_means: SmoothedTrack::latent_rows(&post.smoothed_means),
        latent_covs: post.smoothed_covs,
        loglik: post.log_likelihood,
        s_selected: model.s,
    })
}
