//! Divergence functions, ratio models, the observable per-round loss and its
//! gradient, plus the estimation-error diagnostic.
//!
//! The per-round loss over parameters theta is
//! `mean_{S0}[dpsi(h)h - psi(h)] - mean_{St}[dpsi(h)]` with `h = h(x, theta)`
//! the ratio model output, specialized per divergence kind:
//!
//! * LR (exponential link): `1/2 mean_{S0} ln(1+e^{-g z}) + 1/2 mean_{St} ln(1+e^{g z})`
//! * LS (linear link):      `1/2 mean_{S0} (z)^{2g} - mean_{St} (z)^g + 1/2`
//! * KL (exponential link): `mean_{S0} e^{g z} - g mean_{St} z`
//!
//! where `z = x . theta` and `g` is the flattening exponent.

use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DivergenceKind {
    Ls,
    Lr,
    Kl,
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DivergenceKind::Ls => write!(f, "ls"),
            DivergenceKind::Lr => write!(f, "lr"),
            DivergenceKind::Kl => write!(f, "kl"),
        }
    }
}

/// Divergence choice plus its strong-convexity constant on the working
/// domain `[1/beta, beta]` and the flattening exponent.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    /// Strong convexity on the working domain (LS: 1, LR: 1/(beta+beta^2), KL: 1/beta).
    pub mu: f64,
    /// Flattening exponent in (0, 1].
    pub gamma_flat: f64,
}

impl DivergenceSpec {
    pub fn new(kind: DivergenceKind, beta: f64, gamma_flat: f64) -> Result<Self> {
        if !(gamma_flat > 0.0 && gamma_flat <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma_flat must be in (0,1], got {gamma_flat}"
            )));
        }
        // LS loses convexity outside [1/2, 1].
        if kind == DivergenceKind::Ls && gamma_flat < 0.5 {
            return Err(Error::InvalidArgument(format!(
                "LS flattening requires gamma_flat in [1/2,1], got {gamma_flat}"
            )));
        }
        let mu = match kind {
            DivergenceKind::Ls => 1.0,
            DivergenceKind::Lr => 1.0 / (beta + beta * beta),
            DivergenceKind::Kl => 1.0 / beta,
        };
        Ok(DivergenceSpec { kind, mu, gamma_flat })
    }

    /// The link the kind's hypothesis space uses.
    pub fn required_link(&self) -> Link {
        match self.kind {
            DivergenceKind::Ls => Link::Linear,
            DivergenceKind::Lr | DivergenceKind::Kl => Link::Exponential,
        }
    }
}

fn check_domain(kind: DivergenceKind, t: f64) -> Result<()> {
    match kind {
        DivergenceKind::Ls => Ok(()),
        DivergenceKind::Lr | DivergenceKind::Kl if t > 0.0 => Ok(()),
        _ => Err(Error::Domain(format!("psi_{kind} undefined at t = {t}"))),
    }
}

pub fn psi_value(spec: &DivergenceSpec, t: f64) -> Result<f64> {
    check_domain(spec.kind, t)?;
    Ok(match spec.kind {
        DivergenceKind::Ls => 0.5 * (t - 1.0) * (t - 1.0),
        DivergenceKind::Lr => t * t.ln() - (t + 1.0) * (t + 1.0).ln(),
        DivergenceKind::Kl => t * t.ln() - t,
    })
}

pub fn psi_deriv(spec: &DivergenceSpec, t: f64) -> Result<f64> {
    check_domain(spec.kind, t)?;
    Ok(match spec.kind {
        DivergenceKind::Ls => t - 1.0,
        DivergenceKind::Lr => (t / (1.0 + t)).ln(),
        DivergenceKind::Kl => t.ln(),
    })
}

pub fn psi_second(spec: &DivergenceSpec, t: f64) -> Result<f64> {
    check_domain(spec.kind, t)?;
    Ok(match spec.kind {
        DivergenceKind::Ls => 1.0,
        DivergenceKind::Lr => 1.0 / (t * (1.0 + t)),
        DivergenceKind::Kl => 1.0 / t,
    })
}

/// `B_psi(a || b) = psi(a) - psi(b) - dpsi(b)(a - b)`; nonnegative, zero iff a = b.
pub fn bregman_div(spec: &DivergenceSpec, a: f64, b: f64) -> Result<f64> {
    let v = psi_value(spec, a)? - psi_value(spec, b)? - psi_deriv(spec, b)? * (a - b);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Link {
    Exponential,
    Linear,
}

/// A parametric density-ratio function `x -> h(x, theta)`.
#[derive(Debug, Clone)]
pub struct RatioModel {
    pub link: Link,
    pub theta: Array1<f64>,
    pub norm_bound: f64,
}

impl RatioModel {
    pub fn new(link: Link, theta: Array1<f64>, norm_bound: f64) -> Result<Self> {
        let norm = theta.dot(&theta).sqrt();
        if norm > norm_bound + 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "||theta|| = {norm} exceeds bound S = {norm_bound}"
            )));
        }
        Ok(RatioModel { link, theta, norm_bound })
    }

    /// Exponential link: `exp(x.theta)`; linear link: `x.theta` (may be
    /// negative; weight consumers clip at zero).
    pub fn eval(&self, x: &ArrayView1<f64>) -> f64 {
        let z = x.dot(&self.theta);
        match self.link {
            Link::Exponential => z.exp(),
            Link::Linear => z,
        }
    }
}

pub fn ratio_eval(model: &RatioModel, x: &ArrayView1<f64>) -> f64 {
    model.eval(x)
}

/// Numerically stable ln(1 + e^u).
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Sign-preserving power, the continuation of z^g to negative z used by the
/// flattened LS loss.
fn signed_pow(z: f64, g: f64) -> f64 {
    z.signum() * z.abs().powf(g)
}

fn check_pairing(spec: &DivergenceSpec, model: &RatioModel) -> Result<()> {
    if spec.required_link() != model.link {
        return Err(Error::InvalidArgument(format!(
            "divergence {} requires {:?} link, model has {:?}",
            spec.kind,
            spec.required_link(),
            model.link
        )));
    }
    Ok(())
}

/// Per-sample offline integrand (includes the LS constant spread as +1/2
/// added once in the caller).
fn offline_term(spec: &DivergenceSpec, z: f64) -> f64 {
    let g = spec.gamma_flat;
    match spec.kind {
        DivergenceKind::Lr => 0.5 * softplus(-g * z),
        DivergenceKind::Ls => 0.5 * z.abs().powf(2.0 * g),
        DivergenceKind::Kl => (g * z).exp(),
    }
}

/// Per-sample online integrand (the `-dpsi(h)` part).
fn online_term(spec: &DivergenceSpec, z: f64) -> f64 {
    let g = spec.gamma_flat;
    match spec.kind {
        DivergenceKind::Lr => 0.5 * softplus(g * z),
        DivergenceKind::Ls => -signed_pow(z, g),
        DivergenceKind::Kl => -g * z,
    }
}

fn constant_term(spec: &DivergenceSpec) -> f64 {
    match spec.kind {
        DivergenceKind::Ls => 0.5,
        _ => 0.0,
    }
}

/// Observable per-round loss over the offline set and the round's batch.
/// Rows of `offline` / `online` are samples.
pub fn empirical_loss(
    spec: &DivergenceSpec,
    model: &RatioModel,
    offline: &Array2<f64>,
    online: &Array2<f64>,
) -> Result<f64> {
    check_pairing(spec, model)?;
    if offline.nrows() == 0 || online.nrows() == 0 {
        return Err(Error::InvalidArgument("empirical_loss: empty sample list".into()));
    }
    let z0 = offline.dot(&model.theta);
    let zt = online.dot(&model.theta);
    let a = z0.iter().map(|&z| offline_term(spec, z)).sum::<f64>() / z0.len() as f64;
    let b = zt.iter().map(|&z| online_term(spec, z)).sum::<f64>() / zt.len() as f64;
    Ok(a + b + constant_term(spec))
}

fn offline_term_grad_coef(spec: &DivergenceSpec, z: f64) -> f64 {
    let g = spec.gamma_flat;
    match spec.kind {
        DivergenceKind::Lr => 0.5 * g * (sigmoid(g * z) - 1.0),
        DivergenceKind::Ls => g * signed_pow(z, 2.0 * g - 1.0),
        DivergenceKind::Kl => g * (g * z).exp(),
    }
}

fn online_term_grad_coef(spec: &DivergenceSpec, z: f64) -> f64 {
    let g = spec.gamma_flat;
    match spec.kind {
        DivergenceKind::Lr => 0.5 * g * sigmoid(g * z),
        DivergenceKind::Ls => -g * z.abs().powf(g - 1.0),
        DivergenceKind::Kl => -g,
    }
}

/// Analytic gradient of [`empirical_loss`] at the model's theta.
pub fn empirical_grad(
    spec: &DivergenceSpec,
    model: &RatioModel,
    offline: &Array2<f64>,
    online: &Array2<f64>,
) -> Result<Array1<f64>> {
    check_pairing(spec, model)?;
    if offline.nrows() == 0 || online.nrows() == 0 {
        return Err(Error::InvalidArgument("empirical_grad: empty sample list".into()));
    }
    let d = model.theta.len();
    let mut grad = Array1::<f64>::zeros(d);
    let z0 = offline.dot(&model.theta);
    for (row, &z) in offline.rows().into_iter().zip(z0.iter()) {
        let c = offline_term_grad_coef(spec, z) / offline.nrows() as f64;
        grad.scaled_add(c, &row);
    }
    let zt = online.dot(&model.theta);
    for (row, &z) in online.rows().into_iter().zip(zt.iter()) {
        let c = online_term_grad_coef(spec, z) / online.nrows() as f64;
        grad.scaled_add(c, &row);
    }
    Ok(grad)
}

/// Monte-Carlo stand-in for the expected loss: the online average is replaced
/// by `n_mc` draws from the round distribution. Diagnostic only.
pub fn expected_loss_mc<R: Rng, F: FnMut(&mut R) -> Array1<f64>>(
    spec: &DivergenceSpec,
    model: &RatioModel,
    offline: &Array2<f64>,
    mut dt_sampler: F,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pairing(spec, model)?;
    if n_mc < 1 {
        return Err(Error::InvalidArgument("expected_loss_mc: n_mc must be >= 1".into()));
    }
    if offline.nrows() == 0 {
        return Err(Error::InvalidArgument("expected_loss_mc: empty offline set".into()));
    }
    let z0 = offline.dot(&model.theta);
    let a = z0.iter().map(|&z| offline_term(spec, z)).sum::<f64>() / z0.len() as f64;
    let mut b = 0.0;
    for _ in 0..n_mc {
        let x = dt_sampler(rng);
        let z = x.dot(&model.theta);
        b += online_term(spec, z);
    }
    Ok(a + b / n_mc as f64 + constant_term(spec))
}

/// Mean absolute deviation from a ground-truth ratio over the offline set.
pub fn estimation_error<F: Fn(&ArrayView1<f64>) -> f64>(
    model: &RatioModel,
    r_star: F,
    offline: &Array2<f64>,
) -> f64 {
    if offline.nrows() == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for row in offline.rows() {
        sum += (model.eval(&row) - r_star(&row)).abs();
    }
    sum / offline.nrows() as f64
}
