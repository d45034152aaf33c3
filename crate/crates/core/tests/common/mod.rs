//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mveks::ssm::Lgssm;

pub struct DenseGaussian {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Posterior of the stacked latent trajectory by direct conditioning of the
/// joint Gaussian: Cov(z_i, z_j) = P0 + min(i, j) s E.
pub fn dense_posterior(model: &Lgssm<f64>, obs: &DMatrix<f64>) -> DenseGaussian {
    let steps = obs.nrows();
    let d = model.initial_mean.len();
    let n = obs.ncols();
    let q = &model.dynamics_base * model.smoothing;
    let big = steps * d;
    let mut mean = DVector::zeros(big);
    let mut cov = DMatrix::zeros(big, big);
    for i in 0..steps {
        mean.rows_mut(i * d, d).copy_from(&model.initial_mean);
        for j in 0..steps {
            let block = &model.initial_cov + &q * (i.min(j) as f64);
            cov.view_mut((i * d, j * d), (d, d)).copy_from(&block);
        }
    }
    let observed: Vec<(usize, usize)> =
        (0..steps).flat_map(|t| (0..n).map(move |i| (t, i))).filter(|&(t, i)| obs[(t, i)].is_finite()).collect();
    let k = observed.len();
    if k == 0 {
        return DenseGaussian {
            means: (0..steps).map(|t| mean.rows(t * d, d).into_owned()).collect(),
            covs: (0..steps).map(|t| cov.view((t * d, t * d), (d, d)).into_owned()).collect(),
            log_likelihood: 0.0,
        };
    }
    let mut h = DMatrix::zeros(k, big);
    let mut resid = DVector::zeros(k);
    let mut noise = DMatrix::zeros(k, k);
    for (r, &(t, i)) in observed.iter().enumerate() {
        for c in 0..d {
            h[(r, t * d + c)] = model.obs_map[(i, c)];
        }
        resid[r] = obs[(t, i)] - model.obs_offset[i];
        noise[(r, r)] = model.obs_var[(t, i)];
    }
    resid -= &h * &mean;
    let s = &h * &cov * h.transpose() + noise;
    let s_inv = s.clone().try_inverse().expect("innovation covariance invertible");
    let gain = &cov * h.transpose() * &s_inv;
    let post_mean = &mean + &gain * &resid;
    let post_cov = &cov - &gain * &h * &cov;
    let logdet = s.determinant().ln();
    let quad = (resid.transpose() * &s_inv * &resid)[(0, 0)];
    let log_likelihood = -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
    DenseGaussian {
        means: (0..steps).map(|t| post_mean.rows(t * d, d).into_owned()).collect(),
        covs: (0..steps).map(|t| post_cov.view((t * d, t * d), (d, d)).into_owned()).collect(),
        log_likelihood,
    }
}

fn spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(d, d) * 0.2) * scale
}

/// Random model/observation instance with `steps * d <= 30`.
pub fn random_instance(seed: u64) -> (Lgssm<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=3usize);
    let steps = rng.random_range(1..=30 / d);
    let n = rng.random_range(1..=4usize);
    let model = Lgssm {
        initial_mean: DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
        initial_cov: spd(&mut rng, d, 2.0),
        dynamics_base: spd(&mut rng, d, 1.0),
        smoothing: rng.random_range(0.1..3.0),
        obs_map: DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5)),
        obs_offset: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        obs_var: DMatrix::from_fn(steps, n, |_, _| rng.random_range(0.05..2.0)),
    };
    let obs = DMatrix::from_fn(steps, n, |_, _| {
        if rng.random_bool(0.2) {
            f64::NAN
        } else {
            rng.random_range(-3.0..3.0)
        }
    });
    (model, obs)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}
