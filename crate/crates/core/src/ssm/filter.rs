//! Forward filter and RTS backward pass shared by the linear and extended
//! smoothers.
//!
//! With diagonal observation noise the measurement update never needs the
//! n x n innovation covariance `S = H P H^T + D`. Writing `A = H^T D^-1 H` and
//! `b = H^T D^-1 e`:
//!
//! * posterior covariance `M = (P^-1 + A)^-1 = (I + P A)^-1 P`
//! * gain `K = M H^T D^-1`, so `K e = M b`, `K H = M A`, `K D K^T = M A M`
//! * `log det S = log det D + log det(I + P A)`
//! * `e^T S^-1 e = e^T D^-1 e - b^T M b`
//!
//! The covariance is still propagated in Joseph form,
//! `(I - K H) P (I - K H)^T + K D K^T`, and symmetrized every step.

use nalgebra::{DMatrix, DVector};

use super::{ObservationModel, PosteriorTrack, Prior};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Added to every observed variance of a step whose update is singular.
pub const DIAGONAL_JITTER: f64 = 1e-9;
/// Step in `log s` for the central-difference likelihood gradient.
pub const LOG_S_STEP: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

struct Workspace<T: Scalar> {
    pred: DVector<T>,
    jac: DMatrix<T>,
    usable: Vec<bool>,
    rows: Vec<(usize, T, T)>,
    // d x d column-major scratch
    a: Vec<T>,
    b: Vec<T>,
    lu: Vec<T>,
    piv: Vec<usize>,
    post: Vec<T>,
    gain: Vec<T>,
    ka: Vec<T>,
    tmp: Vec<T>,
    tmp2: Vec<T>,
    jrow: Vec<T>,
    q: DMatrix<T>,
}

/// `out = x * y` for d x d column-major matrices.
#[inline(always)]
fn matmul<T: Scalar>(out: &mut [T], x: &[T], y: &[T], d: usize) {
    for (oc, yc) in out.chunks_exact_mut(d).zip(y.chunks_exact(d)) {
        oc.fill(T::zero());
        for (xk, &ykc) in x.chunks_exact(d).zip(yc) {
            for (o, &xv) in oc.iter_mut().zip(xk) {
                *o += xv * ykc;
            }
        }
    }
}

/// In-place LU with partial pivoting; returns the determinant, or `None` when
/// a pivot is exactly zero.
#[inline(always)]
fn lu_factor<T: Scalar>(a: &mut [T], piv: &mut [usize], d: usize) -> Option<T> {
    let mut det = T::one();
    for k in 0..d {
        let mut p = k;
        let mut best = a[k * d + k].abs();
        for r in k + 1..d {
            let v = a[k * d + r].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        piv[k] = p;
        if best == T::zero() {
            return None;
        }
        if p != k {
            for c in 0..d {
                a.swap(c * d + k, c * d + p);
            }
            det = -det;
        }
        let pivot = a[k * d + k];
        det *= pivot;
        for r in k + 1..d {
            let f = a[k * d + r] / pivot;
            a[k * d + r] = f;
            for c in k + 1..d {
                let u = a[c * d + k];
                a[c * d + r] -= f * u;
            }
        }
    }
    Some(det)
}

/// Solves `LU X = B` in place for a d x d right-hand side.
#[inline(always)]
fn lu_solve<T: Scalar>(lu: &[T], piv: &[usize], b: &mut [T], d: usize) {
    for c in 0..d {
        let col = &mut b[c * d..(c + 1) * d];
        for k in 0..d {
            col.swap(k, piv[k]);
        }
        for r in 1..d {
            let mut acc = col[r];
            for k in 0..r {
                acc -= lu[k * d + r] * col[k];
            }
            col[r] = acc;
        }
        for r in (0..d).rev() {
            let mut acc = col[r];
            for k in r + 1..d {
                acc -= lu[k * d + r] * col[k];
            }
            col[r] = acc / lu[r * d + r];
        }
    }
}

impl<T: Scalar> Workspace<T> {
    fn new(d: usize, n: usize, q: DMatrix<T>) -> Self {
        let z = vec![T::zero(); d * d];
        Workspace {
            pred: DVector::zeros(n),
            jac: DMatrix::zeros(n, d),
            usable: vec![true; n],
            rows: Vec::with_capacity(n),
            a: z.clone(),
            b: vec![T::zero(); d],
            lu: z.clone(),
            piv: vec![0; d],
            post: z.clone(),
            gain: vec![T::zero(); d],
            ka: z.clone(),
            tmp: z.clone(),
            tmp2: z,
            jrow: vec![T::zero(); d],
            q,
        }
    }

    /// Measurement update at step `t`; `m`, `p` hold the predicted moments on
    /// entry and the filtered moments on success. Returns the step's
    /// log-likelihood contribution.
    fn update<O: ObservationModel<T>>(
        &mut self,
        t: usize,
        m: &mut DVector<T>,
        p: &mut DMatrix<T>,
        obs: &DMatrix<T>,
        var: &DMatrix<T>,
        om: &O,
    ) -> Result<T> {
        om.linearize(t, m, &mut self.pred, &mut self.jac, &mut self.usable)?;
        self.rows.clear();
        let mut needs_jitter = false;
        for i in 0..obs.ncols() {
            let y = obs[(t, i)];
            let v = var[(t, i)];
            if !y.is_finite() || !self.usable[i] || !v.is_finite() {
                continue;
            }
            if self.jac.row(i).iter().any(|x| !x.is_finite()) || !self.pred[i].is_finite() {
                return Err(Error::JacobianFailure(format!("row {i} at step {t}")));
            }
            needs_jitter |= v <= T::zero();
            self.rows.push((i, y - self.pred[i], v));
        }
        if self.rows.is_empty() {
            return Ok(T::zero());
        }
        let jitter = lit::<T>(DIAGONAL_JITTER);
        let first = if needs_jitter { jitter } else { T::zero() };
        match self.try_update(m, p, first) {
            Ok(ll) => Ok(ll),
            Err(_) if !needs_jitter => self.try_update(m, p, jitter).map_err(|e| at_step(e, t)),
            Err(e) => Err(at_step(e, t)),
        }
    }

    fn try_update(&mut self, m: &mut DVector<T>, p: &mut DMatrix<T>, jitter: T) -> Result<T> {
        // constant dimensions let the small loops unroll
        match m.len() {
            3 => self.try_update_dim(m, p, jitter, 3),
            d => self.try_update_dim(m, p, jitter, d),
        }
    }

    #[inline(always)]
    fn try_update_dim(&mut self, m: &mut DVector<T>, p: &mut DMatrix<T>, jitter: T, d: usize) -> Result<T> {
        let Workspace { jac, rows, a, b, lu, piv, post, gain, ka, tmp, tmp2, jrow, .. } = self;
        let n = jac.nrows();
        let js = jac.as_slice();
        a.fill(T::zero());
        b.fill(T::zero());
        let mut quad = T::zero();
        let mut logdet_d = T::zero();
        for &(i, e, v) in rows.iter() {
            let v = v + jitter;
            if !(v > T::zero()) {
                return Err(Error::NumericalFailure("non-positive observation variance".into()));
            }
            let inv = T::one() / v;
            for (c, j) in jrow.iter_mut().enumerate() {
                *j = js[c * n + i];
            }
            for (c, (ac, &jc)) in a.chunks_exact_mut(d).zip(jrow.iter()).enumerate() {
                let w = jc * inv;
                b[c] += w * e;
                for (x, &jr) in ac[c..].iter_mut().zip(&jrow[c..]) {
                    *x += w * jr;
                }
            }
            quad += e * e * inv;
            logdet_d += v.ln();
        }
        for c in 0..d {
            for r in c + 1..d {
                a[r * d + c] = a[c * d + r];
            }
        }

        let ps = p.as_mut_slice();
        // I + P A
        matmul(lu, ps, a, d);
        for k in 0..d {
            lu[k * d + k] += T::one();
        }
        let det = lu_factor(lu, piv, d);
        let det = match det {
            Some(det) if det > T::zero() && det.is_finite() => det,
            _ => return Err(Error::NumericalFailure("innovation covariance is singular".into())),
        };
        post.copy_from_slice(ps);
        lu_solve(lu, piv, post, d);
        symmetrize_slice(post, d);
        if post.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("innovation covariance is singular".into()));
        }

        for r in 0..d {
            let mut acc = T::zero();
            for k in 0..d {
                acc += post[k * d + r] * b[k];
            }
            gain[r] = acc;
        }
        matmul(ka, post, a, d);
        // Joseph form: (I - MA) P (I - MA)^T + M A M
        for (t, k) in tmp.iter_mut().zip(ka.iter()) {
            *t = -*k;
        }
        for k in 0..d {
            tmp[k * d + k] += T::one();
        }
        matmul(tmp2, tmp, ps, d);
        for (c, pc) in ps.chunks_exact_mut(d).enumerate() {
            pc.fill(T::zero());
            for (k, (t2k, kak)) in tmp2.chunks_exact(d).zip(ka.chunks_exact(d)).enumerate() {
                let (w1, w2) = (tmp[k * d + c], post[c * d + k]);
                for ((o, &x), &y) in pc.iter_mut().zip(t2k).zip(kak) {
                    *o += x * w1 + y * w2;
                }
            }
        }
        symmetrize_slice(ps, d);
        for r in 0..d {
            m[r] += gain[r];
        }

        let mut bmb = T::zero();
        for r in 0..d {
            bmb += b[r] * gain[r];
        }
        let nobs = lit::<T>(rows.len() as f64);
        let ll = -(nobs * lit::<T>(LN_2PI) + logdet_d + det.ln() + quad - bmb) * lit::<T>(0.5);
        if !ll.is_finite() {
            return Err(Error::NumericalFailure("non-finite log-likelihood".into()));
        }
        Ok(ll)
    }
}

#[inline(always)]
fn symmetrize_slice<T: Scalar>(m: &mut [T], d: usize) {
    let half = lit::<T>(0.5);
    for r in 0..d {
        for c in 0..r {
            let v = (m[c * d + r] + m[r * d + c]) * half;
            m[c * d + r] = v;
            m[r * d + c] = v;
        }
    }
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::NumericalFailure(msg) => Error::NumericalFailure(format!("{msg} at step {t}")),
        other => other,
    }
}

#[inline]
pub(crate) fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = lit::<T>(0.5);
    for r in 0..n {
        for c in 0..r {
            let v = (m[(r, c)] + m[(c, r)]) * half;
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

fn dynamics<T: Scalar>(prior: &Prior<'_, T>) -> DMatrix<T> {
    prior.dynamics_base * prior.smoothing
}

/// Runs the forward pass, calling `store` with the filtered moments of each step.
fn forward<T: Scalar, O: ObservationModel<T>>(
    prior: &Prior<'_, T>,
    om: &O,
    obs: &DMatrix<T>,
    mut store: impl FnMut(&DVector<T>, &DMatrix<T>),
) -> Result<T> {
    let d = prior.initial_mean.len();
    let mut ws = Workspace::new(d, obs.ncols(), dynamics(prior));
    let mut m = prior.initial_mean.clone();
    let mut p = prior.initial_cov.clone();
    let mut ll = T::zero();
    for t in 0..obs.nrows() {
        if t > 0 {
            p += &ws.q;
        }
        ll += ws.update(t, &mut m, &mut p, obs, prior.obs_var, om)?;
        store(&m, &p);
    }
    Ok(ll)
}

pub(crate) fn log_likelihood<T: Scalar, O: ObservationModel<T>>(
    prior: &Prior<'_, T>,
    om: &O,
    obs: &DMatrix<T>,
) -> Result<T> {
    forward(prior, om, obs, |_, _| {})
}

pub(crate) fn smooth<T: Scalar, O: ObservationModel<T>>(
    prior: &Prior<'_, T>,
    om: &O,
    obs: &DMatrix<T>,
) -> Result<PosteriorTrack<T>> {
    let steps = obs.nrows();
    let mut filtered_means = Vec::with_capacity(steps);
    let mut filtered_covs = Vec::with_capacity(steps);
    let log_likelihood = forward(prior, om, obs, |m, p| {
        filtered_means.push(m.clone());
        filtered_covs.push(p.clone());
    })?;

    let q = dynamics(prior);
    let mut smoothed_means = filtered_means.clone();
    let mut smoothed_covs = filtered_covs.clone();
    for t in (0..steps.saturating_sub(1)).rev() {
        let pf = &filtered_covs[t];
        let pp = pf + &q;
        // G = Pf Pp^-1, and both are symmetric so G^T = Pp^-1 Pf
        let gain_t = match pp.clone().cholesky() {
            Some(ch) => ch.solve(pf),
            None => pp
                .clone()
                .lu()
                .solve(pf)
                .ok_or_else(|| Error::NumericalFailure(format!("singular predicted covariance at step {}", t + 1)))?,
        };
        let gain = gain_t.transpose();
        let dm = &smoothed_means[t + 1] - &filtered_means[t];
        let mean = &filtered_means[t] + &gain * dm;
        let dp = &smoothed_covs[t + 1] - &pp;
        let mut cov = pf + &gain * dp * &gain_t;
        symmetrize(&mut cov);
        smoothed_means[t] = mean;
        smoothed_covs[t] = cov;
    }

    Ok(PosteriorTrack { filtered_means, filtered_covs, smoothed_means, smoothed_covs, log_likelihood })
}
