//! Cross-view consistency check and variance inflation.
//!
//! For each view the latent state is estimated from the other views under an
//! uninformative prior, the view is predicted from it, and the squared
//! Mahalanobis distance of the observed point under the posterior predictive
//! covariance `Q^v = D^v + W^v B W^v^T` is compared to a threshold. Views that
//! breach it have their variances doubled until they no longer do.

use nalgebra::{DMatrix, DVector, Matrix2, Point3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{triangulate_median, Rig};
use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::linear::LinearObsModel;
use crate::nonlinear::build_obs_map;
use crate::scalar::{lit, Scalar};
use crate::ssm::ObservationModel;

pub const DEFAULT_THRESHOLD: f64 = 5.0;
pub const DEFAULT_FACTOR: f64 = 2.0;
pub const DEFAULT_MAX_DOUBLINGS: u32 = 30;
const RANK_JITTER: f64 = 1e-10;
const RANK_RCOND: f64 = 1e-10;

/// Which observations form the latent posterior used to predict view `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorScope {
    /// All views except `v`; falls back to all views when that is rank deficient.
    #[default]
    LeaveOneOut,
    AllViews,
}

/// Posterior `N(B W^T D^-1 (x - mu), B)` with `B = (W^T D^-1 W)^-1`, over the
/// rows with finite `x` and `d` for which `include` holds.
fn posterior_rows<T: Scalar>(
    w: &DMatrix<T>,
    d: &DVector<T>,
    x: &DVector<T>,
    mu: &DVector<T>,
    include: impl Fn(usize) -> bool,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let (n, k) = w.shape();
    if d.len() != n || x.len() != n || mu.len() != n {
        return Err(Error::ShapeMismatch(format!("W is {n}x{k}, D {}, x {}, mu {}", d.len(), x.len(), mu.len())));
    }
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut rows = 0;
    for i in (0..n).filter(|&i| include(i) && x[i].is_finite() && d[i].is_finite()) {
        if !(d[i] > T::zero()) {
            return Err(Error::NumericalFailure(format!("non-positive variance in row {i}")));
        }
        let wi = w.row(i);
        let inv = T::one() / d[i];
        a.ger(inv, &wi.transpose(), &wi.transpose(), T::one());
        b.axpy(inv * (x[i] - mu[i]), &wi.transpose(), T::one());
        rows += 1;
    }
    if rows < k {
        return Err(Error::RankDeficient { rows, dim: k });
    }
    let scale = a.diagonal().iter().copied().fold(T::zero(), |m, v| if v > m { v } else { m });
    let invert = |m: DMatrix<T>| {
        let cov = m.cholesky()?.inverse();
        let big = cov.diagonal().iter().copied().fold(T::zero(), |m, v| if v > m { v } else { m });
        (big * scale * lit::<T>(RANK_RCOND) < T::one()).then_some(cov)
    };
    let cov = invert(a.clone())
        .or_else(|| invert(a + DMatrix::identity(k, k) * lit::<T>(RANK_JITTER)))
        .ok_or(Error::RankDeficient { rows, dim: k })?;
    let mean = &cov * b;
    Ok((mean, cov))
}

/// Latent posterior under an uninformative prior; rows with a non-finite
/// observation or variance are dropped.
pub fn latent_posterior_uninformative<T: Scalar>(
    w: &DMatrix<T>,
    d: &DVector<T>,
    x: &DVector<T>,
    mu: &DVector<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    posterior_rows(w, d, x, mu, |_| true)
}

/// Squared Mahalanobis distance of view `v` (rows `2v`, `2v + 1`) from its
/// prediction by the latent posterior of `scope`.
pub fn mahalanobis_view<T: Scalar>(
    w: &DMatrix<T>,
    d: &DVector<T>,
    x: &DVector<T>,
    mu: &DVector<T>,
    v: usize,
    scope: PosteriorScope,
) -> Result<T> {
    let rows = [2 * v, 2 * v + 1];
    if rows[1] >= w.nrows() {
        return Err(Error::ShapeMismatch(format!("view {v} out of range for {} rows", w.nrows())));
    }
    if rows.iter().any(|&i| !x[i].is_finite() || !d[i].is_finite()) {
        return Err(Error::Data(format!("view {v} is missing")));
    }
    let (mean, cov) = match scope {
        PosteriorScope::LeaveOneOut => posterior_rows(w, d, x, mu, |i| i / 2 != v)?,
        PosteriorScope::AllViews => posterior_rows(w, d, x, mu, |_| true)?,
    };
    let wv = w.rows(2 * v, 2);
    let pred = &wv * &mean;
    let r = Vector2::new(x[rows[0]] - mu[rows[0]] - pred[0], x[rows[1]] - mu[rows[1]] - pred[1]);
    let wb = &wv * &cov * wv.transpose();
    let q = Matrix2::new(wb[(0, 0)] + d[rows[0]], wb[(0, 1)], wb[(1, 0)], wb[(1, 1)] + d[rows[1]]);
    let qinv = q.try_inverse().ok_or_else(|| Error::NumericalFailure(format!("singular Q for view {v}")))?;
    Ok(r.dot(&(qinv * r)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflationConfig {
    pub threshold: f64,
    pub factor: f64,
    pub max_doublings: u32,
    pub scope: PosteriorScope,
}

impl Default for InflationConfig {
    fn default() -> Self {
        InflationConfig {
            threshold: DEFAULT_THRESHOLD,
            factor: DEFAULT_FACTOR,
            max_doublings: DEFAULT_MAX_DOUBLINGS,
            scope: PosteriorScope::LeaveOneOut,
        }
    }
}

impl InflationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!("inflation threshold {} must be positive", self.threshold)));
        }
        if !(self.factor > 1.0) || !self.factor.is_finite() {
            return Err(Error::Config(format!("inflation factor {} must exceed 1", self.factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InflationReport {
    /// T x 2V.
    pub inflated_vars: DMatrix<f64>,
    /// T x V.
    pub n_doublings: DMatrix<u32>,
    /// T x V; NaN where the distance could not be evaluated (missing view or
    /// too few other views).
    pub final_distance: DMatrix<f64>,
    pub threshold: f64,
}

impl InflationReport {
    pub fn total_doublings(&self) -> u64 {
        self.n_doublings.iter().map(|&n| n as u64).sum()
    }

    /// Frames with at least one inflated view.
    pub fn inflated_frames(&self) -> Vec<usize> {
        (0..self.n_doublings.nrows()).filter(|&t| self.n_doublings.row(t).iter().any(|&n| n > 0)).collect()
    }
}

/// Observation model the distances are computed under.
#[derive(Debug, Clone, Copy)]
pub enum InflationModel<'a> {
    Linear(&'a LinearObsModel),
    /// Linearized at the nonlinear least-squares 3D point of the other views.
    Nonlinear(&'a Rig<f64>),
}

fn tolerable(e: &Error) -> bool {
    matches!(
        e,
        Error::RankDeficient { .. }
            | Error::InsufficientViews { .. }
            | Error::DegenerateGeometry(_)
            | Error::NoConvergence { .. }
            | Error::NonPositiveDepth { .. }
    )
}

const GN_MAX_ITER: usize = 50;
const GN_TOL: f64 = 1e-10;

fn included_views(rig: &Rig<f64>, x: &DVector<f64>, d: &DVector<f64>, include: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..rig.len()).filter(|&v| include(v) && (0..2).all(|k| x[2 * v + k].is_finite() && d[2 * v + k].is_finite())).collect()
}

fn median_seed(rig: &Rig<f64>, x: &DVector<f64>, views: &[usize]) -> Result<Vector3<f64>> {
    let pts: Vec<_> = (0..rig.len())
        .map(|v| views.contains(&v).then(|| nalgebra::Point2::new(x[2 * v], x[2 * v + 1])))
        .collect();
    Ok(triangulate_median(rig, &pts)?.coords)
}

fn gauss_newton(rig: &Rig<f64>, x: &DVector<f64>, d: &DVector<f64>, views: &[usize], mut z: Vector3<f64>) -> Result<Point3<f64>> {
    for _ in 0..GN_MAX_ITER {
        let mut a = nalgebra::Matrix3::zeros();
        let mut g = Vector3::zeros();
        let mut used = 0;
        for &v in views {
            let Ok((q, j)) = rig.camera(v).project_with_jacobian(&Point3::from(z)) else {
                continue;
            };
            used += 1;
            for k in 0..2 {
                let inv = 1.0 / d[2 * v + k];
                let jr = j.row(k).transpose();
                a += jr * jr.transpose() * inv;
                g += jr * (x[2 * v + k] - q[k]) * inv;
            }
        }
        if used < 2 {
            return Err(Error::InsufficientViews { valid: used, required: 2 });
        }
        let step = a
            .cholesky()
            .map(|c| c.solve(&g))
            .ok_or_else(|| Error::RankDeficient { rows: 2 * used, dim: 3 })?;
        z += step;
        if step.norm() <= GN_TOL * (1.0 + z.norm()) {
            return Ok(Point3::from(z));
        }
    }
    Ok(Point3::from(z))
}

/// Weighted Gauss-Newton estimate of the 3D point seen by the included views.
pub fn nonlinear_least_squares(
    rig: &Rig<f64>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    include: impl Fn(usize) -> bool,
) -> Result<Point3<f64>> {
    let views = included_views(rig, x, d, include);
    gauss_newton(rig, x, d, &views, median_seed(rig, x, &views)?)
}

/// As [`nonlinear_least_squares`], starting from `seed` and falling back to a
/// fresh triangulation if that start fails.
fn nls_seeded(
    rig: &Rig<f64>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    include: impl Fn(usize) -> bool,
    seed: Option<Vector3<f64>>,
) -> Result<Point3<f64>> {
    let views = included_views(rig, x, d, include);
    if views.len() < 2 {
        return Err(Error::InsufficientViews { valid: views.len(), required: 2 });
    }
    if let Some(z0) = seed {
        if let Ok(p) = gauss_newton(rig, x, d, &views, z0) {
            return Ok(p);
        }
    }
    gauss_newton(rig, x, d, &views, median_seed(rig, x, &views)?)
}

/// Distance of view `v` under the linearization of the rig at the point fitted
/// to the other views (or to all views for [`PosteriorScope::AllViews`]).
fn nonlinear_distance(
    rig: &Rig<f64>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    v: usize,
    scope: PosteriorScope,
    seed: Option<Vector3<f64>>,
) -> Result<f64> {
    let z = match scope {
        PosteriorScope::LeaveOneOut => nls_seeded(rig, x, d, |u| u != v, seed)?,
        PosteriorScope::AllViews => nls_seeded(rig, x, d, |_| true, seed)?,
    };
    let map = build_obs_map(rig);
    let n = x.len();
    let zv = z.coords.clone_owned();
    let zd = DVector::from_column_slice(zv.as_slice());
    let (mut pred, mut jac, mut usable) = (DVector::zeros(n), DMatrix::zeros(n, 3), vec![true; n]);
    map.linearize(0, &zd, &mut pred, &mut jac, &mut usable)?;
    if !usable[2 * v] {
        return Err(Error::NonPositiveDepth { depth: f64::NAN });
    }
    let mu = &pred - &jac * &zd;
    let xm = DVector::from_fn(n, |i, _| if usable[i] { x[i] } else { f64::NAN });
    mahalanobis_view(&jac, d, &xm, &mu, v, scope)
}

/// Distance of view `v` at one frame; `None` when it cannot be evaluated.
fn view_distance(
    model: InflationModel<'_>,
    x: &DVector<f64>,
    d: &DVector<f64>,
    v: usize,
    scope: PosteriorScope,
    seed: Option<Vector3<f64>>,
) -> Result<Option<f64>> {
    if !(x[2 * v].is_finite() && x[2 * v + 1].is_finite()) {
        return Ok(None);
    }
    let eval = |scope| match model {
        InflationModel::Linear(m) => mahalanobis_view(&m.w, d, x, &m.mu, v, scope),
        InflationModel::Nonlinear(rig) => nonlinear_distance(rig, x, d, v, scope, seed),
    };
    match eval(scope) {
        Ok(dist) => Ok(Some(dist)),
        Err(e) if tolerable(&e) && scope == PosteriorScope::LeaveOneOut => match eval(PosteriorScope::AllViews) {
            Ok(dist) => Ok(Some(dist)),
            Err(e) if tolerable(&e) => Ok(None),
            Err(e) => Err(e),
        },
        Err(e) if tolerable(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

struct FrameResult {
    vars: DVector<f64>,
    doublings: Vec<u32>,
    distance: Vec<f64>,
}

fn inflate_frame(
    model: InflationModel<'_>,
    x: &DVector<f64>,
    d0: DVector<f64>,
    cfg: &InflationConfig,
    seed: Option<Vector3<f64>>,
) -> Result<FrameResult> {
    let n_views = x.len() / 2;
    let mut d = d0;
    let mut doublings = vec![0u32; n_views];
    let mut distance = vec![f64::NAN; n_views];
    let pair = n_views == 2;
    let seed = match model {
        InflationModel::Nonlinear(rig) if seed.is_none() => {
            let all = included_views(rig, x, &d, |_| true);
            median_seed(rig, x, &all).ok()
        }
        _ => seed,
    };
    loop {
        for (v, slot) in distance.iter_mut().enumerate() {
            *slot = view_distance(model, x, &d, v, cfg.scope, seed)?.unwrap_or(f64::NAN);
        }
        let worst = (0..n_views)
            .filter(|&v| distance[v] > cfg.threshold && doublings[v] < cfg.max_doublings)
            .max_by(|&a, &b| distance[a].total_cmp(&distance[b]).then(b.cmp(&a)));
        let Some(v) = worst else {
            break;
        };
        let targets: Vec<usize> = if pair { vec![0, 1] } else { vec![v] };
        let mut dist = Some(distance[v]);
        while let Some(dv) = dist {
            if !(dv > cfg.threshold) || doublings[v] >= cfg.max_doublings {
                break;
            }
            for &u in &targets {
                if doublings[u] < cfg.max_doublings {
                    d[2 * u] *= cfg.factor;
                    d[2 * u + 1] *= cfg.factor;
                    doublings[u] += 1;
                }
            }
            dist = view_distance(model, x, &d, v, cfg.scope, seed)?;
        }
    }
    Ok(FrameResult { vars: d, doublings, distance })
}

/// Takes the view with the largest distance above the threshold, doubles its
/// variances until it falls below, and repeats until no view breaches it.
pub fn inflate(summary: &EnsembleSummary, model: InflationModel<'_>, cfg: &InflationConfig) -> Result<InflationReport> {
    inflate_seeded(summary, model, cfg, None)
}

/// [`inflate`] with per-frame starting points (T x 3) for the nonlinear
/// least-squares fits, e.g. an initial triangulated track.
pub fn inflate_seeded(
    summary: &EnsembleSummary,
    model: InflationModel<'_>,
    cfg: &InflationConfig,
    seeds: Option<&DMatrix<f64>>,
) -> Result<InflationReport> {
    cfg.validate()?;
    let (t_n, n) = summary.median.shape();
    let n_views = n / 2;
    if let Some(m) = seeds {
        if m.shape() != (t_n, 3) {
            return Err(Error::ShapeMismatch(format!("seeds are {:?}, expected ({t_n}, 3)", m.shape())));
        }
    }
    if let InflationModel::Linear(m) = model {
        if m.w.nrows() != n {
            return Err(Error::ShapeMismatch(format!("model has {} rows, data {n}", m.w.nrows())));
        }
    }
    if let InflationModel::Nonlinear(rig) = model {
        if rig.len() != n_views {
            return Err(Error::ShapeMismatch(format!("rig has {} cameras, data has {n_views} views", rig.len())));
        }
    }
    let frames: Vec<FrameResult> = (0..t_n)
        .into_par_iter()
        .map(|t| {
            let x = summary.median.row(t).transpose();
            let d = summary.variance.row(t).transpose();
            let seed = seeds
                .map(|m| Vector3::new(m[(t, 0)], m[(t, 1)], m[(t, 2)]))
                .filter(|z| z.iter().all(|v| v.is_finite()));
            inflate_frame(model, &x, d, cfg, seed)
        })
        .collect::<Result<_>>()?;
    let mut report = InflationReport {
        inflated_vars: DMatrix::zeros(t_n, n),
        n_doublings: DMatrix::zeros(t_n, n_views),
        final_distance: DMatrix::zeros(t_n, n_views),
        threshold: cfg.threshold,
    };
    for (t, f) in frames.into_iter().enumerate() {
        report.inflated_vars.row_mut(t).copy_from(&f.vars.transpose());
        for v in 0..n_views {
            report.n_doublings[(t, v)] = f.doublings[v];
            report.final_distance[(t, v)] = f.distance[v];
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loading_returns_observation() {
        let w = DMatrix::<f64>::identity(3, 3);
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let (m, b) = latent_posterior_uninformative(&w, &d, &x, &DVector::zeros(3)).unwrap();
        assert!((m - &x).amax() < 1e-14);
        assert!((b - DMatrix::from_diagonal(&d)).amax() < 1e-14);
    }

    #[test]
    fn two_views_three_dims_leave_one_out_is_rank_deficient() {
        let w = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let d = DVector::from_element(4, 1.0);
        let x = DVector::from_element(4, 1.0);
        let r = mahalanobis_view(&w, &d, &x, &DVector::zeros(4), 0, PosteriorScope::LeaveOneOut);
        assert!(matches!(r, Err(Error::RankDeficient { rows: 2, dim: 3 })));
    }

    #[test]
    fn collinear_loadings_are_rank_deficient() {
        let w = DMatrix::from_fn(8, 3, |i, j| ((i * 7 + j * 3) as f64).cos());
        let r = latent_posterior_uninformative(&w, &DVector::from_element(8, 1.0), &DVector::zeros(8), &DVector::zeros(8));
        assert!(matches!(r, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn consistent_point_has_zero_distance() {
        let w = DMatrix::from_fn(8, 3, |i, j| (1.3 * i as f64 + 0.7 * (j * j) as f64 + 0.4 * (i * j) as f64).sin());
        let mu = DVector::from_fn(8, |i, _| i as f64);
        let x = &w * DVector::from_vec(vec![1.0, -2.0, 0.5]) + &mu;
        let d = DVector::from_fn(8, |i, _| 1.0 + i as f64);
        for v in 0..4 {
            assert!(mahalanobis_view(&w, &d, &x, &mu, v, PosteriorScope::LeaveOneOut).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_variance_decreases_distance() {
        let w = DMatrix::from_fn(8, 3, |i, j| (1.3 * i as f64 + 0.7 * (j * j) as f64 + 0.4 * (i * j) as f64).sin());
        let mu = DVector::zeros(8);
        let mut x = &w * DVector::from_vec(vec![1.0, -2.0, 0.5]);
        x[0] += 3.0;
        let mut d = DVector::from_element(8, 1.0);
        let before = mahalanobis_view(&w, &d, &x, &mu, 0, PosteriorScope::LeaveOneOut).unwrap();
        d[0] *= 4.0;
        d[1] *= 4.0;
        let after = mahalanobis_view(&w, &d, &x, &mu, 0, PosteriorScope::LeaveOneOut).unwrap();
        assert!(after < before);
    }
}
