//! One-step density-ratio baselines (uLSIF and KLIEP in their parametric
//! linear/exponential forms) plus the full-history OLRE configuration.

use crate::bregman::{DivergenceKind, DivergenceSpec, Link, RatioModel};
use crate::config::Hyperparams;
use crate::ensemble::{CoveringMode, EnsembleState};
use crate::linalg::spd_solve;
use crate::{Error, Result};
use ndarray::{Array1, Array2};

/// Closed-form regularized least-squares fit: theta = (H + lambda I)^-1 h
/// with H = mean_{S0} x x^T and h = mean_{St} x, then a radial rescale onto
/// the norm ball of radius `norm_bound` if violated. Linear link.
pub fn ulsif_fit(
    offline: &Array2<f64>,
    batch: &Array2<f64>,
    lambda_u: f64,
    norm_bound: f64,
) -> Result<RatioModel> {
    if batch.nrows() == 0 || offline.nrows() == 0 {
        return Err(Error::InvalidArgument("ulsif_fit: empty sample set".into()));
    }
    if lambda_u <= 0.0 {
        return Err(Error::InvalidHyperparam(format!(
            "ulsif_fit: lambda_u must be positive, got {lambda_u}"
        )));
    }
    if offline.iter().chain(batch.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("ulsif_fit: non-finite data".into()));
    }
    let d = offline.ncols();
    let mut h_mat = offline.t().dot(offline) / offline.nrows() as f64;
    for i in 0..d {
        h_mat[(i, i)] += lambda_u;
    }
    let h_vec = batch.t().dot(&Array1::from_elem(batch.nrows(), 1.0 / batch.nrows() as f64));
    let mut theta = spd_solve(&h_mat, &h_vec)?;
    let norm = theta.dot(&theta).sqrt();
    if norm > norm_bound {
        theta.mapv_inplace(|v| v * norm_bound / norm);
    }
    RatioModel::new(Link::Linear, theta, norm_bound)
}

/// KLIEP one-step fit: projected gradient descent on the empirical KL loss
/// mean_{S0} exp(x.theta) - mean_{St} x.theta from theta = 0, with Armijo
/// backtracking (halving, c = 1e-4, 30 halvings max) and projection onto
/// ||theta|| <= norm_bound after every step. Exponential link.
pub fn kliep_fit(
    offline: &Array2<f64>,
    batch: &Array2<f64>,
    steps: usize,
    step_size: f64,
    norm_bound: f64,
) -> Result<RatioModel> {
    if steps < 1 {
        return Err(Error::InvalidArgument("kliep_fit: steps must be >= 1".into()));
    }
    if batch.nrows() == 0 || offline.nrows() == 0 {
        return Err(Error::InvalidArgument("kliep_fit: empty sample set".into()));
    }
    // The beta bound only matters for the loss scaling constant, not here;
    // build the raw (gamma = 1) KL spec for loss/grad evaluation.
    let spec = DivergenceSpec::new(DivergenceKind::Kl, (norm_bound).exp(), 1.0)?;
    let mut theta = Array1::<f64>::zeros(offline.ncols());
    let model = |th: &Array1<f64>| RatioModel::new(Link::Exponential, th.clone(), norm_bound);
    let mut loss = crate::bregman::empirical_loss(&spec, &model(&theta)?, offline, batch)?;
    const ARMIJO_C: f64 = 1e-4;
    for _ in 0..steps {
        let grad = crate::bregman::empirical_grad(&spec, &model(&theta)?, offline, batch)?;
        let g_sq = grad.dot(&grad);
        if g_sq.sqrt() <= 1e-12 {
            break;
        }
        let mut eta = step_size;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = &theta - &(eta * &grad);
            let n = cand.dot(&cand).sqrt();
            if n > norm_bound {
                cand.mapv_inplace(|v| v * norm_bound / n);
            }
            let cand_loss = crate::bregman::empirical_loss(&spec, &model(&cand)?, offline, batch)?;
            if !cand_loss.is_finite() {
                eta *= 0.5;
                continue;
            }
            if cand_loss <= loss - ARMIJO_C * eta * g_sq {
                theta = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break; // no acceptable step: converged to solver precision
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("kliep_fit: non-finite loss".into()));
    }
    model(&theta)
}

/// The OLRE contender: the ensemble machinery configured with the single
/// covering interval [1, T], so it behaves as one ONS over all history.
pub fn olre_estimator(h: Hyperparams, spec: DivergenceSpec) -> EnsembleState {
    EnsembleState::new(h, spec, CoveringMode::Single)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HyperparamsConfig;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn ulsif_identity_reference() {
        // S0 with empirical second moment exactly I: four axis points of
        // norm sqrt(2) give sum(x x^T) = 4 I, so mean(x x^T) = I.
        let r2 = 2.0f64.sqrt();
        let offline = array![[r2, 0.0], [-r2, 0.0], [0.0, r2], [0.0, -r2]];
        let batch = array![[1.0, 0.0]];
        let m = ulsif_fit(&offline, &batch, 1.0, 10.0).unwrap();
        assert_abs_diff_eq!(m.theta[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.theta[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ulsif_zero_batch_mean_gives_zero_theta() {
        let offline = array![[1.0, 0.0], [0.0, 1.0]];
        let batch = array![[1.0, 1.0], [-1.0, -1.0]];
        let m = ulsif_fit(&offline, &batch, 0.1, 10.0).unwrap();
        assert_abs_diff_eq!(m.theta.dot(&m.theta).sqrt(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.eval(&array![3.0, 4.0].view()), 0.0);
    }

    #[test]
    fn ulsif_satisfies_normal_equations() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n0 = 30;
            let nt = 7;
            let d = 4;
            let offline = Array2::from_shape_fn((n0, d), |_| rng.gen_range(-1.0..1.0));
            let batch = Array2::from_shape_fn((nt, d), |_| rng.gen_range(-1.0..1.0));
            // Huge bound so no rescale interferes with the residual check.
            let m = ulsif_fit(&offline, &batch, 0.1, 1e9).unwrap();
            let mut h_mat = offline.t().dot(&offline) / n0 as f64;
            for i in 0..d {
                h_mat[(i, i)] += 0.1;
            }
            let h_vec =
                batch.t().dot(&Array1::from_elem(nt, 1.0 / nt as f64));
            let resid = &h_mat.dot(&m.theta) - &h_vec;
            assert!(resid.dot(&resid).sqrt() <= 1e-10);
        }
    }

    #[test]
    fn ulsif_minimizes_regularized_ls_loss() {
        // Independent oracle: gradient of f(t) = 0.5 t'Ht - h't + 0.5*l*|t|^2
        // vanishes at the returned theta, and random perturbations only
        // increase the objective.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let offline = Array2::from_shape_fn((25, 3), |_| rng.gen_range(-1.0..1.0));
        let batch = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let lam = 0.1;
        let m = ulsif_fit(&offline, &batch, lam, 1e9).unwrap();
        let h_mat = offline.t().dot(&offline) / 25.0;
        let h_vec = batch.t().dot(&Array1::from_elem(5, 1.0 / 5.0));
        let f = |t: &Array1<f64>| 0.5 * t.dot(&h_mat.dot(t)) - h_vec.dot(t) + 0.5 * lam * t.dot(t);
        let base = f(&m.theta);
        for _ in 0..50 {
            let pert = Array1::from_shape_fn(3, |_| rng.gen_range(-0.1..0.1));
            assert!(f(&(&m.theta + &pert)) + 1e-8 >= base);
        }
    }

    #[test]
    fn ulsif_rejects_bad_input() {
        let offline = array![[1.0, 0.0]];
        let batch = array![[1.0, f64::NAN]];
        assert!(ulsif_fit(&offline, &batch, 0.1, 10.0).is_err());
        assert!(ulsif_fit(&offline, &array![[1.0, 0.0]], 0.0, 10.0).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(ulsif_fit(&offline, &empty, 0.1, 10.0).is_err());
    }

    #[test]
    fn ulsif_rescales_to_ball() {
        let offline = array![[0.1, 0.0], [0.0, 0.1]];
        let batch = array![[5.0, 0.0]];
        let m = ulsif_fit(&offline, &batch, 0.01, 1.0).unwrap();
        assert!(m.theta.dot(&m.theta).sqrt() <= 1.0 + 1e-12);
        assert_relative_eq!(m.theta[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kliep_matched_distributions_stay_near_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let offline = Array2::from_shape_fn((50, 3), |_| rng.gen_range(-1.0..1.0));
        let spec = DivergenceSpec::new(DivergenceKind::Kl, (2.5f64).exp(), 1.0).unwrap();
        let zero = RatioModel::new(Link::Exponential, Array1::zeros(3), 2.5).unwrap();
        let loss0 = crate::bregman::empirical_loss(&spec, &zero, &offline, &offline).unwrap();
        assert_abs_diff_eq!(loss0, 1.0, epsilon = 1e-12);
        let m = kliep_fit(&offline, &offline, 100, 1.0, 2.5).unwrap();
        let loss =
            crate::bregman::empirical_loss(&spec, &m, &offline, &offline).unwrap();
        assert!(loss <= loss0 + 1e-12);
        assert!(m.theta.dot(&m.theta).sqrt() <= 0.5, "theta stayed small");
    }

    #[test]
    fn kliep_monotone_descent_and_ball() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let offline = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
        let batch = Array2::from_shape_fn((10, 3), |_| rng.gen_range(0.0..1.0));
        let spec = DivergenceSpec::new(DivergenceKind::Kl, (2.5f64).exp(), 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=20 {
            let m = kliep_fit(&offline, &batch, k, 1.0, 2.5).unwrap();
            let loss = crate::bregman::empirical_loss(&spec, &m, &offline, &batch).unwrap();
            assert!(loss <= prev + 1e-12, "step {k}: {loss} > {prev}");
            assert!(m.theta.dot(&m.theta).sqrt() <= 2.5 + 1e-8);
            prev = loss;
        }
    }

    #[test]
    fn kliep_rejects_zero_steps() {
        let offline = array![[1.0]];
        assert!(kliep_fit(&offline, &offline, 0, 1.0, 2.5).is_err());
    }

    #[test]
    fn one_step_fits_are_stateless() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let offline = Array2::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let batches: Vec<Array2<f64>> = (0..4)
            .map(|_| Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let fit_all = |order: &[usize]| -> Vec<(Array1<f64>, Array1<f64>)> {
            order
                .iter()
                .map(|&i| {
                    let u = ulsif_fit(&offline, &batches[i], 0.1, 2.5).unwrap().theta;
                    let k = kliep_fit(&offline, &batches[i], 50, 1.0, 2.5).unwrap().theta;
                    (u, k)
                })
                .collect()
        };
        let fwd = fit_all(&[0, 1, 2, 3]);
        let rev = fit_all(&[3, 2, 1, 0]);
        for i in 0..4 {
            assert_eq!(fwd[i].0, rev[3 - i].0);
            assert_eq!(fwd[i].1, rev[3 - i].1);
        }
    }

    #[test]
    fn olre_round_one_outputs_zero() {
        let h = HyperparamsConfig {
            dim: Some(2),
            feature_bound_r: Some(1.0),
            horizon: Some(16),
            gamma_ons: Some(0.5),
            ..Default::default()
        }
        .validate()
        .unwrap();
        let spec = DivergenceSpec::new(DivergenceKind::Lr, h.beta, 1.0).unwrap();
        let mut olre = olre_estimator(h, spec);
        assert_eq!(olre.k_total, 1);
        let offline = array![[0.5, 0.1], [-0.2, 0.3]];
        let batch = array![[0.4, 0.4]];
        let diag = olre.round(&offline, 1, &batch).unwrap();
        assert_eq!(diag.theta_hat, Array1::<f64>::zeros(2));
        assert_eq!(diag.weights.len(), 1);
        assert_abs_diff_eq!(diag.weights[0].2, 1.0);
    }
}
