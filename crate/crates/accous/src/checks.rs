//! Executable invariant suites shared by the CLI `check` subcommand and the
//! acceptance tests: finite-difference gradients, projection KKT conditions,
//! inverse-maintenance drift, meta-weight simplex preservation, covering
//! cardinality, full-history equivalence, the estimation-error inequality,
//! and the sublinear-regret property.

use crate::bregman::{
    empirical_grad, empirical_loss, DivergenceKind, DivergenceSpec, RatioModel,
};
use crate::config::{HyperparamsConfig, SeedSpec};
use crate::datagen::{feature_matrix, sample_batch, xs_matrix, GaussianMixtureSpec, ShiftPattern, ShiftSchedule};
use crate::ensemble::{covering_at, CoveringMode, EnsembleState};
use crate::harness::{
    self, DataSource, ExperimentConfig, Method,
};
use crate::ons::{ons_init, proj_weighted_ball};
use crate::predictor::FlattenSpec;
use crate::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome { name: name.to_string(), passed, detail }
    }
}

/// Runs a named suite: `props`, `prop2`, or `regret`.
pub fn run_suite(suite: &str) -> Result<Vec<CheckOutcome>> {
    match suite {
        "props" => suite_props(),
        "prop2" => suite_prop2(10_000),
        "regret" => suite_regret(),
        other => Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    }
}

fn rand_theta<R: Rng>(rng: &mut R, d: usize, s: f64) -> Array1<f64> {
    let mut t: Array1<f64> = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
    let n = t.dot(&t).sqrt();
    if n > s {
        t.mapv_inplace(|v| v * s * 0.9 / n);
    }
    t
}

/// Gradient vs central finite differences, all divergence kinds,
/// flatten exponents 1/2 and 1, 100 random draws each combination.
pub fn check_fd_gradients() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_0001);
    let s = 1.5;
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    for kind in [DivergenceKind::Lr, DivergenceKind::Ls, DivergenceKind::Kl] {
        for gamma in [0.5, 1.0] {
            let spec = DivergenceSpec::new(kind, (2.0f64).exp(), gamma)?;
            for i in 0..100 {
                let d = rng.gen_range(2..=5);
                let offline = Array2::from_shape_fn((6, d), |_| rng.gen_range(-1.0..1.0));
                let online = Array2::from_shape_fn((3, d), |_| rng.gen_range(-1.0..1.0));
                let theta = rand_theta(&mut rng, d, s);
                let model = RatioModel::new(spec.required_link(), theta.clone(), s)?;
                let grad = empirical_grad(&spec, &model, &offline, &online)?;
                let mut fd = Array1::<f64>::zeros(d);
                let h = 1e-5;
                for j in 0..d {
                    let mut tp = theta.clone();
                    tp[j] += h;
                    let mut tm = theta.clone();
                    tm[j] -= h;
                    let lp = empirical_loss(
                        &spec,
                        &RatioModel::new(spec.required_link(), tp, s + 1.0)?,
                        &offline,
                        &online,
                    )?;
                    let lm = empirical_loss(
                        &spec,
                        &RatioModel::new(spec.required_link(), tm, s + 1.0)?,
                        &offline,
                        &online,
                    )?;
                    fd[j] = (lp - lm) / (2.0 * h);
                }
                let diff = &grad - &fd;
                let rel = diff.dot(&diff).sqrt() / fd.dot(&fd).sqrt().max(1e-8);
                if rel > worst {
                    worst = rel;
                    worst_case = format!("kind {kind} gamma {gamma} draw {i}");
                }
            }
        }
    }
    Ok(CheckOutcome::new(
        "fd_gradients",
        worst <= 1e-5,
        format!("worst relative error {worst:.3e} ({worst_case})"),
    ))
}

/// Weighted-ball projection KKT conditions over 500 random SPD/point pairs.
pub fn check_projection_kkt() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_0002);
    let s = 1.0;
    let mut failures = 0usize;
    let mut detail = String::new();
    for i in 0..500 {
        let d = rng.gen_range(2..=6);
        let b = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        let mut a = b.t().dot(&b);
        for j in 0..d {
            a[(j, j)] += 0.1;
        }
        let scale = if i % 3 == 0 { 0.5 } else { 3.0 };
        let mut p: Array1<f64> = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let n = p.dot(&p).sqrt();
        p.mapv_inplace(|v| v * scale / n);
        let out = proj_weighted_ball(&a, &p, s)?;
        let out_norm = out.dot(&out).sqrt();
        let ok = if p.dot(&p).sqrt() <= s {
            (&out - &p).iter().all(|v| v.abs() <= 1e-12)
        } else if (out_norm - s).abs() > 1e-8 || out_norm > s + 1e-8 {
            false
        } else {
            // A(p - out) must be parallel to out.
            let res = a.dot(&(&p - &out));
            let cos = res.dot(&out) / (res.dot(&res).sqrt() * out_norm).max(1e-300);
            cos >= 1.0 - 1e-6
        };
        if !ok {
            failures += 1;
            if detail.is_empty() {
                detail = format!("first failure at pair {i}");
            }
        }
    }
    Ok(CheckOutcome::new(
        "projection_kkt",
        failures == 0,
        if failures == 0 { "500/500 pairs satisfy KKT".into() } else { format!("{failures} failures; {detail}") },
    ))
}

/// Maintained inverse vs direct factorization after 100 rank-one updates.
pub fn check_sherman_morrison() -> Result<CheckOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5eed_0003);
    let d = 8;
    let h = HyperparamsConfig {
        dim: Some(d),
        feature_bound_r: Some(5.0),
        gamma_ons: Some(1.0),
        horizon: Some(200),
        ..Default::default()
    }
    .validate()?;
    let mut st = ons_init((1, 200), &h)?;
    let mut max_dev = 0.0f64;
    for _ in 0..100 {
        let g = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        st.step(&g)?;
        let direct = crate::linalg::spd_inverse(&st.a)?;
        for (m, e) in st.a_inv.iter().zip(direct.iter()) {
            max_dev = max_dev.max((m - e).abs());
        }
    }
    Ok(CheckOutcome::new(
        "sherman_morrison",
        max_dev <= 1e-6,
        format!("max entrywise deviation {max_dev:.3e} after 100 updates"),
    ))
}

/// Meta weights stay on the simplex (1e-10) for every round of a T=2048 run.
pub fn check_simplex() -> Result<CheckOutcome> {
    let mixture = GaussianMixtureSpec::benchmark(2);
    let r = mixture.feature_bound();
    let h = HyperparamsConfig {
        dim: Some(2),
        radius_s: Some(1.0),
        feature_bound_r: Some(r),
        gamma_ons: Some(1.0),
        horizon: Some(2048),
        n_offline: Some(20),
        n_online: Some(1),
        ..Default::default()
    }
    .validate()?;
    let spec = DivergenceSpec::new(DivergenceKind::Lr, h.beta, 1.0)?;
    let mut ens = EnsembleState::new(h.clone(), spec, CoveringMode::Geometric { min_len: 1 });
    let seeds = SeedSpec::new(17);
    let mut rng = seeds.stream("simplex-check")?;
    let offline = feature_matrix(&sample_batch(&mixture, 0.9, 20, r, &mut rng)?);
    let mut worst = 0.0f64;
    for t in 1..=2048u64 {
        let alpha = (t as f64 / 2048.0).min(1.0);
        let batch = sample_batch(&mixture, alpha, 1, r, &mut rng)?;
        let xs: Vec<Array1<f64>> = batch.into_iter().map(|p| p.x).collect();
        let diag = ens.round(&offline, t, &xs_matrix(&xs))?;
        let sum: f64 = diag.weights.iter().map(|(_, _, w)| w).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(CheckOutcome::new(
        "meta_simplex",
        worst <= 1e-10,
        format!("max |sum(p) - 1| = {worst:.3e} over 2048 rounds"),
    ))
}

/// Active-set cardinality |A_t| <= ceil(log2 t) + 1 for all t <= 4096.
pub fn check_covering_cardinality() -> Result<CheckOutcome> {
    let horizon = 4096u64;
    for t in 1..=horizon {
        let cov = covering_at(t, horizon, 1)?;
        let bound = (t as f64).log2().ceil() as usize + 1;
        if cov.active.len() > bound {
            return Ok(CheckOutcome::new(
                "covering_cardinality",
                false,
                format!("|A_{t}| = {} exceeds {bound}", cov.active.len()),
            ));
        }
    }
    Ok(CheckOutcome::new(
        "covering_cardinality",
        true,
        "|A_t| within ceil(log2 t) + 1 for all t <= 4096".into(),
    ))
}

/// The single-interval ensemble emits bit-identical parameters to a lone ONS
/// stepped on the same stream, over 1000 rounds.
pub fn check_olre_equivalence() -> Result<CheckOutcome> {
    let mixture = GaussianMixtureSpec::benchmark(3);
    let r = mixture.feature_bound();
    let t_max = 1000u64;
    let h = HyperparamsConfig {
        dim: Some(3),
        radius_s: Some(1.5),
        feature_bound_r: Some(r),
        gamma_ons: Some(1.0),
        horizon: Some(t_max),
        n_offline: Some(30),
        n_online: Some(1),
        ..Default::default()
    }
    .validate()?;
    let spec = DivergenceSpec::new(DivergenceKind::Lr, h.beta, 1.0)?;
    let mut ens = crate::baselines::olre_estimator(h.clone(), spec);
    let mut lone = ons_init((1, t_max), &h)?;
    let seeds = SeedSpec::new(23);
    let mut rng = seeds.stream("olre-equiv")?;
    let offline = feature_matrix(&sample_batch(&mixture, 0.9, 30, r, &mut rng)?);
    for t in 1..=t_max {
        let alpha = 1.0 - (t as f64 / t_max as f64);
        let batch = sample_batch(&mixture, alpha, 1, r, &mut rng)?;
        let xs: Vec<Array1<f64>> = batch.into_iter().map(|p| p.x).collect();
        let batch_mat = xs_matrix(&xs);
        let manual_theta = lone.theta.clone();
        let diag = ens.round(&offline, t, &batch_mat)?;
        if diag
            .theta_hat
            .iter()
            .zip(manual_theta.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Ok(CheckOutcome::new(
                "olre_bit_equivalence",
                false,
                format!("divergence at round {t}"),
            ));
        }
        let model = RatioModel::new(spec.required_link(), manual_theta, h.radius_s)?;
        let grad = empirical_grad(&spec, &model, &offline, &batch_mat)?;
        lone.step(&grad)?;
    }
    Ok(CheckOutcome::new(
        "olre_bit_equivalence",
        true,
        "bit-identical over 1000 rounds".into(),
    ))
}

/// The full numerical-invariant suite (acceptance criterion 6).
pub fn suite_props() -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_fd_gradients()?,
        check_projection_kkt()?,
        check_sherman_morrison()?,
        check_simplex()?,
        check_covering_cardinality()?,
        check_olre_equivalence()?,
    ])
}

/// A dedicated synthetic-run configuration for the inequality check.
fn prop2_config(pattern: ShiftPattern) -> Result<ExperimentConfig> {
    let mixture = GaussianMixtureSpec::benchmark(5);
    let r = mixture.feature_bound();
    let hyper = HyperparamsConfig {
        dim: Some(5),
        radius_s: Some(2.5),
        feature_bound_r: Some(r),
        gamma_ons: Some(1.0),
        horizon: Some(2000),
        n_offline: Some(300),
        n_online: Some(1),
        ..Default::default()
    }
    .validate()?;
    let schedule = ShiftSchedule::new(pattern, 2000);
    Ok(ExperimentConfig {
        hyper,
        divergence: DivergenceKind::Lr,
        gamma_flat: 1.0,
        flatten: FlattenSpec::Identity,
        methods: vec![Method::Accous],
        seeds: vec![1],
        source: DataSource::Synthetic { schedule, mixture },
        min_len: 4,
        lambda_u: 0.1,
        kliep_steps: 50,
        kliep_step_size: 1.0,
        check_prop2: true,
        n_mc: 0, // overwritten below
        out_dir: None,
    })
}

/// Estimation-error inequality on dedicated T=2000 runs, one per pattern.
pub fn suite_prop2(n_mc: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for pattern in [ShiftPattern::Lin, ShiftPattern::Squ, ShiftPattern::Sin, ShiftPattern::Ber] {
        let mut cfg = prop2_config(pattern)?;
        cfg.n_mc = n_mc;
        let result = harness::run_seed(&cfg, 1, false)?;
        let p2 = result
            .summary
            .prop2
            .ok_or_else(|| Error::Numerical("inequality check missing from summary".into()))?;
        out.push(CheckOutcome::new(
            &format!("prop2_{pattern}"),
            p2.holds,
            format!("lhs {:.6e} vs 1.1 * rhs {:.6e}", p2.lhs, p2.rhs),
        ));
    }
    Ok(out)
}

/// Pooled-batch minimizer of the cumulative observable loss via projected
/// gradient descent with backtracking.
fn pooled_minimizer(
    spec: &DivergenceSpec,
    offline: &Array2<f64>,
    pooled: &Array2<f64>,
    s: f64,
) -> Result<Array1<f64>> {
    let d = offline.ncols();
    let mut theta = Array1::<f64>::zeros(d);
    let model = |t: &Array1<f64>| RatioModel::new(spec.required_link(), t.clone(), s);
    let mut loss = empirical_loss(spec, &model(&theta)?, offline, pooled)?;
    for _ in 0..500 {
        let grad = empirical_grad(spec, &model(&theta)?, offline, pooled)?;
        let gnorm = grad.dot(&grad).sqrt();
        if gnorm <= 1e-10 {
            break;
        }
        let mut eta = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let mut cand = &theta - &(eta * &grad);
            let n = cand.dot(&cand).sqrt();
            if n > s {
                cand.mapv_inplace(|v| v * s / n);
            }
            let cl = empirical_loss(spec, &model(&cand)?, offline, pooled)?;
            if cl < loss - 1e-4 * eta * gnorm * gnorm {
                theta = cand;
                loss = cl;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok(theta)
}

/// Sublinear static regret of a lone ONS on a stationary stream:
/// regret(4000)/4000 <= 0.5 * regret(500)/500 for a majority of 5 seeds.
pub fn suite_regret() -> Result<Vec<CheckOutcome>> {
    let mixture = GaussianMixtureSpec::benchmark(3);
    let r = mixture.feature_bound();
    let t_max = 4000u64;
    let t_early = 500u64;
    let h = HyperparamsConfig {
        dim: Some(3),
        radius_s: Some(1.5),
        feature_bound_r: Some(r),
        gamma_ons: Some(1.0),
        horizon: Some(t_max),
        n_offline: Some(50),
        n_online: Some(1),
        ..Default::default()
    }
    .validate()?;
    let spec = DivergenceSpec::new(DivergenceKind::Lr, h.beta, 1.0)?;
    let mut passes = 0usize;
    let mut details = Vec::new();
    for seed in 1..=5u64 {
        let seeds = SeedSpec::new(seed);
        let mut rng = seeds.stream("regret")?;
        let offline = feature_matrix(&sample_batch(&mixture, 0.9, 50, r, &mut rng)?);
        // Stationary online distribution: alpha fixed at 0.3 != alpha0.
        let mut ons = ons_init((1, t_max), &h)?;
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(t_max as usize);
        let mut cum_loss = 0.0;
        let mut cum_at_early = 0.0;
        let mut pooled_early: Option<Array2<f64>> = None;
        for t in 1..=t_max {
            let pt = sample_batch(&mixture, 0.3, 1, r, &mut rng)?.remove(0).x;
            let batch = xs_matrix(std::slice::from_ref(&pt));
            let model = RatioModel::new(spec.required_link(), ons.theta.clone(), h.radius_s)?;
            cum_loss += empirical_loss(&spec, &model, &offline, &batch)?;
            let grad = empirical_grad(&spec, &model, &offline, &batch)?;
            ons.step(&grad)?;
            rows.push(pt);
            if t == t_early {
                cum_at_early = cum_loss;
                pooled_early = Some(xs_matrix(&rows));
            }
        }
        let pooled_full = xs_matrix(&rows);
        let pooled_early = pooled_early.expect("early pool recorded");
        let star_early = pooled_minimizer(&spec, &offline, &pooled_early, h.radius_s)?;
        let star_full = pooled_minimizer(&spec, &offline, &pooled_full, h.radius_s)?;
        let loss_star_early = empirical_loss(
            &spec,
            &RatioModel::new(spec.required_link(), star_early, h.radius_s)?,
            &offline,
            &pooled_early,
        )? * t_early as f64;
        let loss_star_full = empirical_loss(
            &spec,
            &RatioModel::new(spec.required_link(), star_full, h.radius_s)?,
            &offline,
            &pooled_full,
        )? * t_max as f64;
        let rate_early = (cum_at_early - loss_star_early) / t_early as f64;
        let rate_full = (cum_loss - loss_star_full) / t_max as f64;
        let pass = rate_full <= 0.5 * rate_early && rate_early > 0.0;
        if pass {
            passes += 1;
        }
        details.push(format!("seed {seed}: {rate_full:.3e} vs 0.5*{rate_early:.3e}"));
    }
    Ok(vec![CheckOutcome::new(
        "ons_sublinear_regret",
        passes >= 3,
        format!("{passes}/5 seeds pass; {}", details.join("; ")),
    )])
}
