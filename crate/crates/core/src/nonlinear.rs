//! Calibrated smoother: the latent state is the 3D world position and the
//! observation map stacks every camera's projection.

use nalgebra::{DMatrix, DVector, Point3};

use crate::calib::{median_in_place, triangulate_median, Rig};
use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::linear::{covariance, E_REGULARIZATION, INITIAL_COV_SCALE};
use crate::scalar::{lit, Scalar};
use crate::smoothing::{select_smoothing, Smoothing, SmoothedTrack, SmoothingFit};
use crate::ssm::{extended_kalman_smooth, extended_log_likelihood, finite_difference_jacobian, Nlssm, ObservationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

const FD_STEP: f64 = 1e-6;

/// `h(z) = [project(cam_1, z); ...; project(cam_V, z)]`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionMap<'a, T: Scalar> {
    pub rig: &'a Rig<T>,
    pub jacobian: JacobianMode,
}

pub fn build_obs_map<T: Scalar>(rig: &Rig<T>) -> ProjectionMap<'_, T> {
    ProjectionMap { rig, jacobian: JacobianMode::Analytic }
}

impl<T: Scalar> ProjectionMap<'_, T> {
    /// Evaluates `h(z)`; views the point is behind are NaN.
    pub fn eval(&self, z: &DVector<T>) -> DVector<T> {
        let p = Point3::new(z[0], z[1], z[2]);
        let mut out = DVector::from_element(2 * self.rig.len(), lit::<T>(f64::NAN));
        for (v, cam) in self.rig.cameras().iter().enumerate() {
            if let Ok(q) = cam.project(&p) {
                out[2 * v] = q.x;
                out[2 * v + 1] = q.y;
            }
        }
        out
    }

    pub fn jacobian_at(&self, z: &DVector<T>) -> Result<DMatrix<T>> {
        let n = 2 * self.rig.len();
        let mut pred = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, 3);
        let mut usable = vec![true; n];
        self.linearize(0, z, &mut pred, &mut jac, &mut usable)?;
        Ok(jac)
    }
}

impl<T: Scalar> ObservationModel<T> for ProjectionMap<'_, T> {
    fn state_dim(&self) -> usize {
        3
    }

    fn obs_dim(&self) -> usize {
        2 * self.rig.len()
    }

    fn linearize(
        &self,
        _t: usize,
        state: &DVector<T>,
        pred: &mut DVector<T>,
        jac: &mut DMatrix<T>,
        usable: &mut [bool],
    ) -> Result<()> {
        let p = Point3::new(state[0], state[1], state[2]);
        for (v, cam) in self.rig.cameras().iter().enumerate() {
            let rows = [2 * v, 2 * v + 1];
            let projected = match self.jacobian {
                JacobianMode::Analytic => cam.project_with_jacobian(&p).map(|(q, j)| {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..3 {
                            jac[(r, c)] = j[(k, c)];
                        }
                    }
                    q
                }),
                JacobianMode::FiniteDifference => cam.project(&p).and_then(|q| {
                    let j = finite_difference_jacobian(
                        |z| {
                            let q = cam.project(&Point3::new(z[0], z[1], z[2]))?;
                            Ok(DVector::from_vec(vec![q.x, q.y]))
                        },
                        state,
                        lit(FD_STEP),
                    )?;
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..3 {
                            jac[(r, c)] = j[(k, c)];
                        }
                    }
                    Ok(q)
                }),
            };
            match projected {
                Ok(q) => {
                    pred[rows[0]] = q.x;
                    pred[rows[1]] = q.y;
                    usable[rows[0]] = true;
                    usable[rows[1]] = true;
                }
                Err(Error::NonPositiveDepth { .. }) => {
                    for &r in &rows {
                        pred[r] = T::zero();
                        jac.row_mut(r).fill(T::zero());
                        usable[r] = false;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// `E`, `s` and the triangulated initialization of one keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearObsModel {
    pub e: DMatrix<f64>,
    pub s: f64,
    /// T x 3.
    pub init_track: DMatrix<f64>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl NonlinearObsModel {
    pub fn with_smoothing(&self, s: f64) -> Self {
        NonlinearObsModel { s, ..self.clone() }
    }

    fn nlssm<'a>(&self, map: ProjectionMap<'a, f64>, obs_var: &DMatrix<f64>) -> Nlssm<f64, ProjectionMap<'a, f64>> {
        Nlssm {
            initial_mean: self.initial_mean.clone(),
            initial_cov: self.initial_cov.clone(),
            dynamics_base: self.e.clone(),
            smoothing: self.s,
            map,
            obs_var: obs_var.clone(),
        }
    }
}

/// Median-of-pairs triangulation of every frame; frames that cannot be
/// triangulated are `None`.
pub fn triangulate_summary(rig: &Rig<f64>, summary: &EnsembleSummary) -> Result<Vec<Option<Point3<f64>>>> {
    if rig.len() != summary.n_views() {
        return Err(Error::ShapeMismatch(format!("rig has {} cameras, data has {} views", rig.len(), summary.n_views())));
    }
    (0..summary.n_frames())
        .map(|t| {
            let pts: Vec<_> = (0..summary.n_views()).map(|v| summary.point(t, v)).collect();
            match triangulate_median(rig, &pts) {
                Ok(p) => Ok(Some(p)),
                Err(Error::InsufficientViews { .. } | Error::DegenerateGeometry(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Triangulated track with gaps forward-filled; leading gaps take the
/// component-wise median of the valid frames.
pub fn initial_track(rig: &Rig<f64>, summary: &EnsembleSummary) -> Result<DMatrix<f64>> {
    let pts = triangulate_summary(rig, summary)?;
    let valid: Vec<&Point3<f64>> = pts.iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::InsufficientViews { valid: 0, required: 2 });
    }
    let mut fallback = [0.0; 3];
    for (k, f) in fallback.iter_mut().enumerate() {
        let mut comp: Vec<f64> = valid.iter().map(|p| p[k]).collect();
        *f = median_in_place(&mut comp);
    }
    let mut track = DMatrix::zeros(pts.len(), 3);
    let mut last = fallback;
    for (t, p) in pts.iter().enumerate() {
        if let Some(p) = p {
            last = [p.x, p.y, p.z];
        }
        for k in 0..3 {
            track[(t, k)] = last[k];
        }
    }
    Ok(track)
}

pub fn fit_params_nonlinear(rig: &Rig<f64>, summary: &EnsembleSummary) -> Result<NonlinearObsModel> {
    let init_track = initial_track(rig, summary)?;
    let diffs: Vec<DVector<f64>> = (1..init_track.nrows())
        .map(|t| (init_track.row(t) - init_track.row(t - 1)).transpose())
        .collect();
    let e = if diffs.is_empty() { DMatrix::zeros(3, 3) } else { covariance(&diffs) }
        + DMatrix::identity(3, 3) * E_REGULARIZATION;
    Ok(NonlinearObsModel {
        e,
        s: 1.0,
        initial_mean: init_track.row(0).transpose(),
        initial_cov: DMatrix::identity(3, 3) * INITIAL_COV_SCALE,
        init_track,
    })
}

pub fn optimize_smoothing_nonlinear(
    rig: &Rig<f64>,
    model: &NonlinearObsModel,
    summary: &EnsembleSummary,
    mode: Smoothing,
) -> Result<SmoothingFit> {
    let mut nl = model.nlssm(build_obs_map(rig), &summary.variance);
    select_smoothing(mode, model.s, |s| {
        nl.smoothing = s;
        extended_log_likelihood(&nl, &summary.median)
    })
}

/// Smoothed 3D track with per-axis posterior variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Track3d {
    pub frame_index: Vec<i64>,
    /// T x 3.
    pub means: DMatrix<f64>,
    /// T x 3.
    pub vars: DMatrix<f64>,
}

pub fn smooth_nonlinear(
    rig: &Rig<f64>,
    model: &NonlinearObsModel,
    summary: &EnsembleSummary,
) -> Result<(SmoothedTrack, Track3d)> {
    let map = build_obs_map(rig);
    let nl = model.nlssm(map, &summary.variance);
    let post = extended_kalman_smooth(&nl, &summary.median)?;
    let (t_n, n) = summary.median.shape();
    let mut means = DMatrix::from_element(t_n, n, f64::NAN);
    let mut pred_vars = DMatrix::from_element(t_n, n, f64::NAN);
    let mut pred = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, 3);
    let mut usable = vec![true; n];
    for t in 0..t_n {
        let z = &post.smoothed_means[t];
        map.linearize(t, z, &mut pred, &mut jac, &mut usable)?;
        let jp = &jac * &post.smoothed_covs[t];
        for i in 0..n {
            if usable[i] {
                means[(t, i)] = pred[i];
                pred_vars[(t, i)] = jp.row(i).dot(&jac.row(i)) + summary.variance[(t, i)];
            }
        }
    }
    let latent_means = SmoothedTrack::latent_rows(&post.smoothed_means);
    let track3d = Track3d {
        frame_index: summary.frame_index.clone(),
        means: latent_means.clone(),
        vars: DMatrix::from_fn(t_n, 3, |t, k| post.smoothed_covs[t][(k, k)]),
    };
    let track = SmoothedTrack {
        keypoint: summary.keypoint.clone(),
        view_names: summary.view_names.clone(),
        frame_index: summary.frame_index.clone(),
        means,
        pred_vars,
        latent_means,
        latent_covs: post.smoothed_covs,
        loglik: post.log_likelihood,
        s_selected: model.s,
    };
    Ok((track, track3d))
}

/// Fits, optionally optimizes `s`, and smooths.
pub fn fit_and_smooth(
    rig: &Rig<f64>,
    summary: &EnsembleSummary,
    mode: Smoothing,
) -> Result<(NonlinearObsModel, SmoothingFit, SmoothedTrack, Track3d)> {
    let model = fit_params_nonlinear(rig, summary)?;
    let fit = optimize_smoothing_nonlinear(rig, &model, summary, mode)?;
    let model = model.with_smoothing(fit.s);
    let (track, track3d) = smooth_nonlinear(rig, &model, summary)?;
    Ok((model, fit, track, track3d))
}
