mod common;

use common::{dense_posterior, random_instance};
use mveks::ssm::{
    extended_kalman_smooth, finite_difference_jacobian, kalman_log_likelihood, kalman_smooth, marginal_loglik_grad_s,
    Lgssm, Nlssm, ObservationModel,
};
use mveks::{Error, Result};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn scalar_model(obs_var: &[f64]) -> Lgssm<f64> {
    Lgssm {
        initial_mean: DVector::from_element(1, 0.5),
        initial_cov: DMatrix::from_element(1, 1, 2.0),
        dynamics_base: DMatrix::from_element(1, 1, 0.7),
        smoothing: 1.3,
        obs_map: DMatrix::from_element(1, 1, 1.0),
        obs_offset: DVector::from_element(1, 0.1),
        obs_var: DMatrix::from_column_slice(obs_var.len(), 1, obs_var),
    }
}

#[test]
fn prior_only_single_step() {
    let mut model = scalar_model(&[1.0]);
    model.initial_mean = DVector::from_vec(vec![1.0, -2.0]);
    model.initial_cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    model.dynamics_base = DMatrix::identity(2, 2);
    model.obs_map = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    let obs = DMatrix::from_element(1, 1, f64::NAN);
    let post = kalman_smooth(&model, &obs).unwrap();
    assert_eq!(post.smoothed_means[0], model.initial_mean);
    assert_eq!(post.smoothed_covs[0], model.initial_cov);
    assert_eq!(post.log_likelihood, 0.0);
}

#[test]
fn scalar_three_steps_matches_joint_gaussian() {
    let model = scalar_model(&[0.5, 1.5, 0.8]);
    let obs = DMatrix::from_column_slice(3, 1, &[1.0, -0.4, 2.2]);
    let post = kalman_smooth(&model, &obs).unwrap();
    let oracle = dense_posterior(&model, &obs);
    for t in 0..3 {
        assert!((post.smoothed_means[t][0] - oracle.means[t][0]).abs() < 1e-10);
        assert!((post.smoothed_covs[t][(0, 0)] - oracle.covs[t][(0, 0)]).abs() < 1e-10);
    }
    assert!((post.log_likelihood - oracle.log_likelihood).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smoother_equals_dense_conditional(seed in 0u64..1_000_000) {
        let (model, obs) = random_instance(seed);
        let post = kalman_smooth(&model, &obs).unwrap();
        let oracle = dense_posterior(&model, &obs);
        for t in 0..obs.nrows() {
            prop_assert!((&post.smoothed_means[t] - &oracle.means[t]).amax() < 1e-8);
            prop_assert!((&post.smoothed_covs[t] - &oracle.covs[t]).amax() < 1e-8);
        }
        prop_assert!((post.log_likelihood - oracle.log_likelihood).abs() < 1e-8);
        prop_assert!((kalman_log_likelihood(&model, &obs).unwrap() - post.log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn filtered_covariances_stay_psd(seed in 0u64..1_000_000) {
        let (model, obs) = random_instance(seed);
        let post = kalman_smooth(&model, &obs).unwrap();
        for cov in post.filtered_covs.iter().chain(&post.smoothed_covs) {
            let eig = cov.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-10, "eigenvalues {eig}");
        }
    }

    #[test]
    fn missing_equals_huge_variance(seed in 0u64..1_000_000) {
        let (model, obs) = random_instance(seed);
        let mut filled = obs.clone();
        let mut inflated = model.clone();
        for t in 0..obs.nrows() {
            for i in 0..obs.ncols() {
                if !obs[(t, i)].is_finite() {
                    filled[(t, i)] = 0.7;
                    inflated.obs_var[(t, i)] = 1e12;
                }
            }
        }
        let a = kalman_smooth(&model, &obs).unwrap();
        let b = kalman_smooth(&inflated, &filled).unwrap();
        for t in 0..obs.nrows() {
            prop_assert!((&a.smoothed_means[t] - &b.smoothed_means[t]).amax() < 1e-6);
        }
    }
}

#[test]
fn huge_dynamics_reduce_to_per_step_gls() {
    let w = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.3, 1.0, 0.5, 0.5, 1.0, -1.0]);
    let steps = 6;
    let var = DMatrix::from_fn(steps, 4, |t, i| 0.5 + 0.1 * ((t + 2 * i) % 5) as f64);
    let obs = DMatrix::from_fn(steps, 4, |t, i| ((t * 7 + i * 3) % 11) as f64 - 5.0);
    let mu = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
    let model = Lgssm {
        initial_mean: DVector::zeros(2),
        initial_cov: DMatrix::identity(2, 2) * 1e12,
        dynamics_base: DMatrix::identity(2, 2),
        smoothing: 1e12,
        obs_map: w.clone(),
        obs_offset: mu.clone(),
        obs_var: var.clone(),
    };
    let post = kalman_smooth(&model, &obs).unwrap();
    for t in 0..steps {
        let dinv = DMatrix::from_diagonal(&var.row(t).transpose().map(|v| 1.0 / v));
        let y = obs.row(t).transpose() - &mu;
        let gls = (w.transpose() * &dinv * &w).try_inverse().unwrap() * w.transpose() * &dinv * y;
        let rel = (&post.smoothed_means[t] - &gls).amax() / gls.amax();
        assert!(rel < 1e-4, "step {t}: rel error {rel}");
    }
}

#[test]
fn likelihood_is_additive_over_independent_blocks() {
    let steps = 8;
    let obs = DMatrix::from_fn(steps, 4, |t, i| ((t * 5 + i * 2) % 7) as f64 * 0.3 - 1.0);
    let var = DMatrix::from_fn(steps, 4, |t, i| 0.3 + 0.05 * ((t + i) % 4) as f64);
    let joint = Lgssm {
        initial_mean: DVector::from_vec(vec![0.2, -0.1]),
        initial_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.7])),
        dynamics_base: DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.9])),
        smoothing: 0.8,
        obs_map: DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 0.0, 0.0, 2.0, 0.0, -1.0]),
        obs_offset: DVector::from_vec(vec![0.1, 0.0, -0.3, 0.2]),
        obs_var: var.clone(),
    };
    let block = |k: usize| Lgssm {
        initial_mean: DVector::from_element(1, joint.initial_mean[k]),
        initial_cov: DMatrix::from_element(1, 1, joint.initial_cov[(k, k)]),
        dynamics_base: DMatrix::from_element(1, 1, joint.dynamics_base[(k, k)]),
        smoothing: 0.8,
        obs_map: joint.obs_map.view((2 * k, k), (2, 1)).into_owned(),
        obs_offset: joint.obs_offset.rows(2 * k, 2).into_owned(),
        obs_var: var.columns(2 * k, 2).into_owned(),
    };
    let total = kalman_log_likelihood(&joint, &obs).unwrap();
    let parts = kalman_log_likelihood(&block(0), &obs.columns(0, 2).into_owned()).unwrap()
        + kalman_log_likelihood(&block(1), &obs.columns(2, 2).into_owned()).unwrap();
    assert!((total - parts).abs() < 1e-10, "{total} vs {parts}");
}

/// Affine map routed through the generic (extended) interface.
struct Affine {
    w: DMatrix<f64>,
    mu: DVector<f64>,
}

impl ObservationModel<f64> for Affine {
    fn state_dim(&self) -> usize {
        self.w.ncols()
    }
    fn obs_dim(&self) -> usize {
        self.w.nrows()
    }
    fn linearize(
        &self,
        _t: usize,
        z: &DVector<f64>,
        pred: &mut DVector<f64>,
        jac: &mut DMatrix<f64>,
        usable: &mut [bool],
    ) -> Result<()> {
        pred.copy_from(&(&self.w * z + &self.mu));
        jac.copy_from(&self.w);
        usable.fill(true);
        Ok(())
    }
}

#[test]
fn extended_with_affine_map_matches_linear() {
    for seed in 0..20 {
        let (model, obs) = random_instance(seed);
        let nl = Nlssm {
            initial_mean: model.initial_mean.clone(),
            initial_cov: model.initial_cov.clone(),
            dynamics_base: model.dynamics_base.clone(),
            smoothing: model.smoothing,
            map: Affine { w: model.obs_map.clone(), mu: model.obs_offset.clone() },
            obs_var: model.obs_var.clone(),
        };
        let a = kalman_smooth(&model, &obs).unwrap();
        let b = extended_kalman_smooth(&nl, &obs).unwrap();
        for t in 0..obs.nrows() {
            assert!((&a.smoothed_means[t] - &b.smoothed_means[t]).amax() < 1e-12);
            assert!((&a.smoothed_covs[t] - &b.smoothed_covs[t]).amax() < 1e-12);
        }
        assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-12);
    }
}

#[test]
fn log_s_gradient_matches_five_point_stencil() {
    let model = scalar_model(&[0.5, 1.5, 0.8]);
    let obs = DMatrix::from_column_slice(3, 1, &[1.0, -0.4, 2.2]);
    let s = 0.9;
    let (ll, grad) = marginal_loglik_grad_s(&model, &obs, s).unwrap();
    let f = |x: f64| kalman_log_likelihood(&model.with_smoothing(s * x.exp()), &obs).unwrap();
    let h = 1e-3;
    let stencil = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
    assert!((grad - stencil).abs() < 1e-6, "{grad} vs {stencil}");
    assert_eq!(ll, f(0.0));
}

#[test]
fn zero_variance_is_jittered() {
    let mut model = scalar_model(&[0.0, 0.0]);
    model.initial_cov = DMatrix::zeros(1, 1);
    let obs = DMatrix::from_column_slice(2, 1, &[0.6, 0.6]);
    let post = kalman_smooth(&model, &obs).unwrap();
    assert!(post.log_likelihood.is_finite());
}

#[test]
fn negative_variance_is_numerical_failure() {
    let model = scalar_model(&[1.0, -1.0]);
    let obs = DMatrix::from_column_slice(2, 1, &[0.6, 0.6]);
    assert!(matches!(kalman_smooth(&model, &obs), Err(Error::NumericalFailure(_))));
}

struct NanJacobian;

impl ObservationModel<f64> for NanJacobian {
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn linearize(
        &self,
        _t: usize,
        z: &DVector<f64>,
        pred: &mut DVector<f64>,
        jac: &mut DMatrix<f64>,
        usable: &mut [bool],
    ) -> Result<()> {
        pred[0] = z[0].sqrt();
        jac[(0, 0)] = f64::NAN;
        usable.fill(true);
        Ok(())
    }
}

#[test]
fn non_finite_jacobian_is_reported() {
    let model = Nlssm {
        initial_mean: DVector::from_element(1, 1.0),
        initial_cov: DMatrix::identity(1, 1),
        dynamics_base: DMatrix::identity(1, 1),
        smoothing: 1.0,
        map: NanJacobian,
        obs_var: DMatrix::from_element(2, 1, 1.0),
    };
    let obs = DMatrix::from_element(2, 1, 1.0);
    assert!(matches!(extended_kalman_smooth(&model, &obs), Err(Error::JacobianFailure(_))));
}

#[test]
fn finite_difference_jacobian_of_smooth_map() {
    let z = DVector::from_vec(vec![0.3, -1.2]);
    let f = |z: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![z[0].sin() * z[1], z[1].exp(), z[0] * z[0]]))
    };
    let jac = finite_difference_jacobian(f, &z, 1e-6).unwrap();
    let exact = DMatrix::from_row_slice(3, 2, &[z[0].cos() * z[1], z[0].sin(), 0.0, z[1].exp(), 2.0 * z[0], 0.0]);
    assert!((jac - exact).amax() < 1e-8);
}

#[test]
fn shape_errors() {
    let model = scalar_model(&[1.0, 1.0]);
    let obs = DMatrix::from_element(3, 1, 1.0);
    assert!(matches!(kalman_smooth(&model, &obs), Err(Error::ShapeMismatch(_))));
    let bad = Lgssm { smoothing: 0.0, ..model };
    assert!(kalman_smooth(&bad, &DMatrix::from_element(2, 1, 1.0)).is_err());
}
