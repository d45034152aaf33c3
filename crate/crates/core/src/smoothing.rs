//! Smoothing-parameter search and the smoothed output shared by the linear
//! and nonlinear smoothers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::LOG_S_STEP;

pub const ADAM_LEARNING_RATE: f64 = 0.25;
pub const ADAM_MAX_ITER: usize = 100;
pub const ADAM_TOL: f64 = 1e-3;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How the smoothing parameter is chosen; `"auto"` or a positive number in
/// configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "SmoothingRepr", into = "SmoothingRepr")]
pub enum Smoothing {
    /// Maximize the marginal likelihood starting from the model's `s`.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SmoothingRepr {
    Fixed(f64),
    Named(String),
}

impl TryFrom<SmoothingRepr> for Smoothing {
    type Error = String;

    fn try_from(r: SmoothingRepr) -> std::result::Result<Self, String> {
        match r {
            SmoothingRepr::Fixed(s) if s > 0.0 && s.is_finite() => Ok(Smoothing::Fixed(s)),
            SmoothingRepr::Fixed(s) => Err(format!("smoothing parameter {s} must be positive")),
            SmoothingRepr::Named(s) if s == "auto" => Ok(Smoothing::Auto),
            SmoothingRepr::Named(s) => Err(format!("smoothing {s:?}: expected \"auto\" or a positive number")),
        }
    }
}

impl From<Smoothing> for SmoothingRepr {
    fn from(s: Smoothing) -> Self {
        match s {
            Smoothing::Auto => SmoothingRepr::Named("auto".into()),
            Smoothing::Fixed(s) => SmoothingRepr::Fixed(s),
        }
    }
}

impl std::str::FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) => SmoothingRepr::Fixed(v).try_into(),
            Err(_) => SmoothingRepr::Named(s.to_string()).try_into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingFit {
    pub s: f64,
    pub log_likelihood: f64,
    pub s_init: f64,
    pub log_likelihood_init: f64,
    pub iterations: usize,
}

/// Adam ascent on `log s` with a central-difference gradient.
///
/// The best iterate is tracked with the mean of the two difference
/// evaluations as its likelihood; the returned point is then re-evaluated
/// exactly and never worse than `s_init`.
pub fn adam_log_s(mut loglik: impl FnMut(f64) -> Result<f64>, s_init: f64) -> Result<SmoothingFit> {
    if !(s_init > 0.0) || !s_init.is_finite() {
        return Err(Error::InvalidModel(format!("initial smoothing parameter {s_init} must be positive")));
    }
    let ll_init = loglik(s_init)?;
    let h = LOG_S_STEP;
    let mut theta = s_init.ln();
    let (mut m, mut v) = (0.0, 0.0);
    let mut best = (theta, f64::NEG_INFINITY);
    let mut iterations = 0;
    for k in 1..=ADAM_MAX_ITER {
        iterations = k;
        let up = loglik((theta + h).exp())?;
        let down = loglik((theta - h).exp())?;
        let center = 0.5 * (up + down);
        if center > best.1 {
            best = (theta, center);
        }
        let g = (up - down) / (2.0 * h);
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m / (1.0 - ADAM_BETA1.powi(k as i32));
        let vhat = v / (1.0 - ADAM_BETA2.powi(k as i32));
        let step = ADAM_LEARNING_RATE * mhat / (vhat.sqrt() + ADAM_EPS);
        theta += step;
        if !theta.is_finite() {
            return Err(Error::NumericalFailure("smoothing parameter search diverged".into()));
        }
        if step.abs() < ADAM_TOL {
            let up = loglik((theta + h).exp())?;
            let down = loglik((theta - h).exp())?;
            if 0.5 * (up + down) > best.1 {
                best = (theta, 0.5 * (up + down));
            }
            break;
        }
    }
    let s_best = best.0.exp();
    let ll_best = loglik(s_best)?;
    let (s, log_likelihood) = if ll_best >= ll_init { (s_best, ll_best) } else { (s_init, ll_init) };
    Ok(SmoothingFit { s, log_likelihood, s_init, log_likelihood_init: ll_init, iterations })
}

/// Resolves a [`Smoothing`] choice into a fit.
pub fn select_smoothing(mode: Smoothing, s_init: f64, mut loglik: impl FnMut(f64) -> Result<f64>) -> Result<SmoothingFit> {
    match mode {
        Smoothing::Auto => adam_log_s(loglik, s_init),
        Smoothing::Fixed(s) => {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("fixed smoothing parameter {s} must be positive")));
            }
            let ll = loglik(s)?;
            Ok(SmoothingFit { s, log_likelihood: ll, s_init: s, log_likelihood_init: ll, iterations: 0 })
        }
    }
}

/// Posterior of one keypoint: per-view smoothed coordinates and posterior
/// predictive variances, plus the latent track.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack {
    pub keypoint: String,
    pub view_names: Vec<String>,
    pub frame_index: Vec<i64>,
    /// T x 2V.
    pub means: DMatrix<f64>,
    /// T x 2V.
    pub pred_vars: DMatrix<f64>,
    /// T x d.
    pub latent_means: DMatrix<f64>,
    pub latent_covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
    pub s_selected: f64,
}

impl SmoothedTrack {
    pub fn n_frames(&self) -> usize {
        self.means.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_means.ncols()
    }

    pub fn max_variance(&self, t: usize) -> f64 {
        self.pred_vars.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn latent_rows(means: &[DVector<f64>]) -> DMatrix<f64> {
        let d = means.first().map_or(0, |m| m.len());
        DMatrix::from_fn(means.len(), d, |t, j| means[t][j])
    }
}
