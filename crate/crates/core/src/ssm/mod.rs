//! Random-walk state-space models with per-step diagonal observation noise.
//!
//! Latent dynamics are `z_t ~ N(z_{t-1}, s E)` with `z_0 ~ N(m_0, P_0)`.
//! Observations are `y_t ~ N(h(z_t), diag(D_t))` where `h` is either affine
//! ([`Lgssm`]) or a differentiable map ([`Nlssm`], handled by a first-order
//! extended filter). Non-finite observations are missing and contribute
//! neither to the update nor to the likelihood.

mod filter;

use nalgebra::{DMatrix, DVector};

pub use filter::{DIAGONAL_JITTER, LOG_S_STEP};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Linear-Gaussian model `y_t = W z_t + mu + v_t`.
#[derive(Debug, Clone)]
pub struct Lgssm<T: Scalar> {
    pub initial_mean: DVector<T>,
    pub initial_cov: DMatrix<T>,
    /// Base dynamics covariance `E`; the per-step covariance is `smoothing * E`.
    pub dynamics_base: DMatrix<T>,
    pub smoothing: T,
    /// `W`, n x d.
    pub obs_map: DMatrix<T>,
    /// `mu`, length n.
    pub obs_offset: DVector<T>,
    /// Diagonal of `D_t` for every step, T x n.
    pub obs_var: DMatrix<T>,
}

/// Observation map evaluated and linearized at a latent state.
pub trait ObservationModel<T: Scalar> {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    /// Writes `h(state)` into `pred` and its Jacobian into `jac` (n x d).
    /// Rows the map cannot produce at this state (for example a camera the
    /// point is behind) are flagged `false` in `usable` and treated as missing.
    fn linearize(
        &self,
        t: usize,
        state: &DVector<T>,
        pred: &mut DVector<T>,
        jac: &mut DMatrix<T>,
        usable: &mut [bool],
    ) -> Result<()>;
}

/// Affine observation `W z + mu`.
#[derive(Debug, Clone, Copy)]
pub struct AffineObservation<'a, T: Scalar> {
    pub map: &'a DMatrix<T>,
    pub offset: &'a DVector<T>,
}

impl<T: Scalar> ObservationModel<T> for AffineObservation<'_, T> {
    fn state_dim(&self) -> usize {
        self.map.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.map.nrows()
    }

    fn linearize(
        &self,
        _t: usize,
        state: &DVector<T>,
        pred: &mut DVector<T>,
        jac: &mut DMatrix<T>,
        usable: &mut [bool],
    ) -> Result<()> {
        pred.copy_from(self.offset);
        pred.gemv(T::one(), self.map, state, T::one());
        jac.copy_from(self.map);
        usable.fill(true);
        Ok(())
    }
}

/// Nonlinear-observation model with the same dynamics as [`Lgssm`].
#[derive(Debug, Clone)]
pub struct Nlssm<T: Scalar, H> {
    pub initial_mean: DVector<T>,
    pub initial_cov: DMatrix<T>,
    pub dynamics_base: DMatrix<T>,
    pub smoothing: T,
    pub map: H,
    pub obs_var: DMatrix<T>,
}

/// Filtered and smoothed moments for every step plus the marginal
/// log-likelihood of the observed entries.
#[derive(Debug, Clone)]
pub struct PosteriorTrack<T: Scalar> {
    pub filtered_means: Vec<DVector<T>>,
    pub filtered_covs: Vec<DMatrix<T>>,
    pub smoothed_means: Vec<DVector<T>>,
    pub smoothed_covs: Vec<DMatrix<T>>,
    pub log_likelihood: T,
}

/// Model pieces shared by the linear and extended paths.
pub(crate) struct Prior<'a, T: Scalar> {
    pub initial_mean: &'a DVector<T>,
    pub initial_cov: &'a DMatrix<T>,
    pub dynamics_base: &'a DMatrix<T>,
    pub smoothing: T,
    pub obs_var: &'a DMatrix<T>,
}

fn validate_prior<T: Scalar>(prior: &Prior<'_, T>, obs: &DMatrix<T>, n: usize) -> Result<()> {
    let d = prior.initial_mean.len();
    if d == 0 {
        return Err(Error::InvalidModel("state dimension must be positive".into()));
    }
    if prior.initial_cov.shape() != (d, d) || prior.dynamics_base.shape() != (d, d) {
        return Err(Error::ShapeMismatch(format!("initial and dynamics covariances must be {d}x{d}")));
    }
    if !(prior.smoothing > T::zero()) || !prior.smoothing.is_finite() {
        return Err(Error::InvalidModel("smoothing parameter must be positive and finite".into()));
    }
    if obs.nrows() == 0 {
        return Err(Error::ShapeMismatch("at least one time step is required".into()));
    }
    if obs.ncols() != n {
        return Err(Error::ShapeMismatch(format!("observations have {} columns, model has {n}", obs.ncols())));
    }
    if prior.obs_var.shape() != obs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "observation variances are {:?}, observations {:?}",
            prior.obs_var.shape(),
            obs.shape()
        )));
    }
    let finite = |m: &DMatrix<T>| m.iter().all(|v| v.is_finite());
    if !finite(prior.initial_cov) || !finite(prior.dynamics_base) || prior.initial_mean.iter().any(|v| !v.is_finite())
    {
        return Err(Error::InvalidModel("non-finite prior or dynamics parameters".into()));
    }
    Ok(())
}

impl<T: Scalar> Lgssm<T> {
    fn prior(&self) -> Prior<'_, T> {
        Prior {
            initial_mean: &self.initial_mean,
            initial_cov: &self.initial_cov,
            dynamics_base: &self.dynamics_base,
            smoothing: self.smoothing,
            obs_var: &self.obs_var,
        }
    }

    fn observation(&self) -> Result<AffineObservation<'_, T>> {
        let d = self.initial_mean.len();
        if self.obs_map.ncols() != d || self.obs_offset.len() != self.obs_map.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "observation map is {:?} and offset has {} entries for state dimension {d}",
                self.obs_map.shape(),
                self.obs_offset.len()
            )));
        }
        Ok(AffineObservation { map: &self.obs_map, offset: &self.obs_offset })
    }

    pub fn with_smoothing(&self, s: T) -> Self {
        Lgssm { smoothing: s, ..self.clone() }
    }
}

impl<T: Scalar, H: ObservationModel<T>> Nlssm<T, H> {
    fn prior(&self) -> Prior<'_, T> {
        Prior {
            initial_mean: &self.initial_mean,
            initial_cov: &self.initial_cov,
            dynamics_base: &self.dynamics_base,
            smoothing: self.smoothing,
            obs_var: &self.obs_var,
        }
    }
}

/// Exact Kalman filter and RTS smoother.
pub fn kalman_smooth<T: Scalar>(model: &Lgssm<T>, obs: &DMatrix<T>) -> Result<PosteriorTrack<T>> {
    let om = model.observation()?;
    let prior = model.prior();
    validate_prior(&prior, obs, om.obs_dim())?;
    filter::smooth(&prior, &om, obs)
}

/// Marginal log-likelihood only (forward pass, nothing stored).
pub fn kalman_log_likelihood<T: Scalar>(model: &Lgssm<T>, obs: &DMatrix<T>) -> Result<T> {
    let om = model.observation()?;
    let prior = model.prior();
    validate_prior(&prior, obs, om.obs_dim())?;
    filter::log_likelihood(&prior, &om, obs)
}

/// First-order extended filter (linearized at each predicted mean) followed by
/// RTS smoothing of the linearized model. For an affine map this is the exact
/// smoother.
pub fn extended_kalman_smooth<T: Scalar, H: ObservationModel<T>>(
    model: &Nlssm<T, H>,
    obs: &DMatrix<T>,
) -> Result<PosteriorTrack<T>> {
    let prior = model.prior();
    check_map_dims(&prior, &model.map)?;
    validate_prior(&prior, obs, model.map.obs_dim())?;
    filter::smooth(&prior, &model.map, obs)
}

pub fn extended_log_likelihood<T: Scalar, H: ObservationModel<T>>(model: &Nlssm<T, H>, obs: &DMatrix<T>) -> Result<T> {
    let prior = model.prior();
    check_map_dims(&prior, &model.map)?;
    validate_prior(&prior, obs, model.map.obs_dim())?;
    filter::log_likelihood(&prior, &model.map, obs)
}

fn check_map_dims<T: Scalar, H: ObservationModel<T>>(prior: &Prior<'_, T>, map: &H) -> Result<()> {
    if map.state_dim() != prior.initial_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "observation map expects state dimension {}, prior has {}",
            map.state_dim(),
            prior.initial_mean.len()
        )));
    }
    Ok(())
}

/// Log-likelihood at `s` and its derivative with respect to `log s`, by a
/// central difference of relative step [`LOG_S_STEP`].
pub fn loglik_grad_log_s<T: Scalar>(mut loglik: impl FnMut(T) -> Result<T>, s: T) -> Result<(T, T)> {
    if !(s > T::zero()) {
        return Err(Error::InvalidModel("smoothing parameter must be positive".into()));
    }
    let h = lit::<T>(LOG_S_STEP);
    let center = loglik(s)?;
    let up = loglik(s * h.exp())?;
    let down = loglik(s * (-h).exp())?;
    Ok((center, (up - down) / (h + h)))
}

/// [`loglik_grad_log_s`] for a linear model.
pub fn marginal_loglik_grad_s<T: Scalar>(model: &Lgssm<T>, obs: &DMatrix<T>, s: T) -> Result<(T, T)> {
    loglik_grad_log_s(|s| kalman_log_likelihood(&model.with_smoothing(s), obs), s)
}

/// Central finite-difference Jacobian of `f` at `z`.
pub fn finite_difference_jacobian<T: Scalar>(
    mut f: impl FnMut(&DVector<T>) -> Result<DVector<T>>,
    z: &DVector<T>,
    step: T,
) -> Result<DMatrix<T>> {
    let f0 = f(z)?;
    let mut jac = DMatrix::zeros(f0.len(), z.len());
    let mut zp = z.clone();
    for j in 0..z.len() {
        let h = step * (T::one() + z[j].abs());
        zp[j] = z[j] + h;
        let fp = f(&zp)?;
        zp[j] = z[j] - h;
        let fm = f(&zp)?;
        zp[j] = z[j];
        let col = (fp - fm) / (h + h);
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::JacobianFailure(format!("entry ({i}, {j})")));
        }
        jac.set_column(j, &col);
    }
    Ok(jac)
}
