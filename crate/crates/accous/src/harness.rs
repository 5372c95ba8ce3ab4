//! Experiment orchestration: runs the streaming estimator and all contenders
//! on a shared per-seed stream, records per-round and summary metrics,
//! verifies the estimation-error inequality empirically, and emits CSV/JSON.

use crate::baselines::{kliep_fit, olre_estimator, ulsif_fit};
use crate::bregman::{estimation_error, DivergenceKind, DivergenceSpec, Link, RatioModel};
use crate::config::{Hyperparams, SeedSpec};
use crate::datagen::{
    feature_matrix, sample_batch, true_ratio, variation_v, xs_matrix, CsvStream,
    GaussianMixtureSpec, ShiftSchedule,
};
use crate::ensemble::{CoveringMode, EnsembleState};
use crate::predictor::{
    error_rate, fix_train, iwerm_train, prepare_weights, FlattenSpec, LinearClassifier, SolverCfg,
};
use crate::{Error, LabeledSample, Result, UnlabeledBatch};
use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Accous,
    Olre,
    Fix,
    Ulsif,
    Kliep,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Accous, Method::Olre, Method::Fix, Method::Ulsif, Method::Kliep];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Accous => "accous",
            Method::Olre => "olre",
            Method::Fix => "fix",
            Method::Ulsif => "ulsif",
            Method::Kliep => "kliep",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accous" => Ok(Method::Accous),
            "olre" => Ok(Method::Olre),
            "fix" => Ok(Method::Fix),
            "ulsif" => Ok(Method::Ulsif),
            "kliep" => Ok(Method::Kliep),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

/// Where the stream comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic { schedule: ShiftSchedule, mixture: GaussianMixtureSpec },
    Csv { offline: PathBuf, stream: PathBuf },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub hyper: Hyperparams,
    pub divergence: DivergenceKind,
    /// Flattening exponent inside the density-ratio loss.
    pub gamma_flat: f64,
    /// Flattening transform on the IWERM weights.
    pub flatten: FlattenSpec,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub source: DataSource,
    /// Minimum covering-interval length for the ensemble.
    pub min_len: u64,
    /// uLSIF ridge parameter.
    pub lambda_u: f64,
    pub kliep_steps: usize,
    pub kliep_step_size: f64,
    /// Run the estimation-error inequality check (synthetic, gamma_flat = 1).
    pub check_prop2: bool,
    /// Monte-Carlo sample count for the inequality check and variation.
    pub n_mc: usize,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("method list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::InvalidArgument(format!("duplicate seed {s}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seed list is empty".into()));
        }
        self.flatten.validate()?;
        if self.check_prop2 {
            if !matches!(self.source, DataSource::Synthetic { .. }) {
                return Err(Error::InvalidArgument(
                    "the inequality check needs the synthetic ratio oracle".into(),
                ));
            }
            if self.gamma_flat != 1.0 {
                return Err(Error::InvalidArgument(
                    "the inequality check requires an unflattened loss (gamma_flat = 1)".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<DivergenceSpec> {
        DivergenceSpec::new(self.divergence, self.hyper.beta, self.gamma_flat)
    }
}

/// One emitted row of telemetry.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub t: u64,
    pub alpha: Option<f64>,
    pub err_accous: Option<f64>,
    pub err_olre: Option<f64>,
    pub err_fix: Option<f64>,
    pub err_ulsif: Option<f64>,
    pub err_kliep: Option<f64>,
    /// Observable loss of the combined estimate, emitted by the ensemble.
    pub loss_hat: Option<f64>,
    /// Mean |r_hat - r*| over the offline set (synthetic only).
    pub est_err: Option<f64>,
    /// IWERM weights floored at 0 or clipped at the cap this round (accous).
    pub clip_count: u64,
    /// Meta-weight mass per dyadic interval-length bucket; sums to 1.
    pub weight_mass: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Check {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_err: BTreeMap<String, f64>,
    pub cumulative_est_err: Option<f64>,
    pub prop2: Option<Prop2Check>,
    pub variation_v: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub summary: SeedSummary,
    /// Dyadic bucket lengths matching `RoundRecord::weight_mass` order.
    pub bucket_lens: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub mean_err: BTreeMap<String, f64>,
    pub std_err: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
}

/// A ratio model in ratio coordinates for a trained LR parameter.
///
/// The LR loss is written in discriminator coordinates (offline mass on the
/// e^{-z} side), so the density ratio consistent with its minimizer is
/// exp(-x.theta); the sign is flipped here, once, when the estimate leaves
/// the optimizer.
pub fn ratio_model_from_theta(
    kind: DivergenceKind,
    theta: &Array1<f64>,
    norm_bound: f64,
) -> Result<RatioModel> {
    match kind {
        DivergenceKind::Lr => RatioModel::new(Link::Exponential, theta.mapv(|v| -v), norm_bound),
        DivergenceKind::Kl => RatioModel::new(Link::Exponential, theta.clone(), norm_bound),
        DivergenceKind::Ls => RatioModel::new(Link::Linear, theta.clone(), norm_bound),
    }
}

/// Dyadic bucket lengths for the configured horizon / minimum length.
pub fn bucket_lengths(horizon: u64, min_len: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut len = 1u64;
    while len <= horizon {
        if len >= min_len {
            out.push(len);
        }
        len <<= 1;
    }
    out
}

struct PerMethodState {
    ensemble: Option<EnsembleState>,
    classifier: Option<LinearClassifier>,
}

/// Per-seed materialized stream.
struct SeedData {
    offline: Vec<LabeledSample>,
    batches: Vec<UnlabeledBatch>,
    alphas: Option<Vec<f64>>,
    mixture: Option<GaussianMixtureSpec>,
}

fn build_seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    match &cfg.source {
        DataSource::Synthetic { schedule, mixture } => {
            let seeds = SeedSpec::new(seed);
            let mut rng_alpha = seeds.stream("alphas")?;
            let alphas = schedule.materialize(&mut rng_alpha)?;
            let mut rng_off = seeds.stream("offline")?;
            let r = cfg.hyper.feature_bound_r;
            let offline =
                sample_batch(mixture, schedule.alpha0, cfg.hyper.n_offline, r, &mut rng_off)?;
            let mut rng_stream = seeds.stream("stream")?;
            let mut batches = Vec::with_capacity(alphas.len());
            for (i, &a) in alphas.iter().enumerate() {
                let pts = sample_batch(mixture, a, cfg.hyper.n_online, r, &mut rng_stream)?;
                let (xs, ys): (Vec<_>, Vec<_>) = pts.into_iter().map(|p| (p.x, p.y)).unzip();
                batches.push(UnlabeledBatch {
                    round: (i + 1) as u64,
                    xs,
                    hidden_ys: Some(ys),
                });
            }
            Ok(SeedData {
                offline,
                batches,
                alphas: Some(alphas),
                mixture: Some(mixture.clone()),
            })
        }
        DataSource::Csv { offline, stream } => {
            let cs: CsvStream =
                crate::datagen::load_csv_stream(offline, stream, cfg.hyper.feature_bound_r)?;
            if cs.dim != cfg.hyper.dim {
                return Err(Error::InvalidArgument(format!(
                    "CSV dimension {} does not match configured dim {}",
                    cs.dim, cfg.hyper.dim
                )));
            }
            Ok(SeedData { offline: cs.offline, batches: cs.batches, alphas: None, mixture: None })
        }
    }
}

/// Runs one seed. `blinded` strips the hidden labels first, which must leave
/// every training-path value unchanged (error columns become absent).
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, blinded: bool) -> Result<SeedResult> {
    let started = std::time::Instant::now();
    let spec = cfg.spec()?;
    let h = &cfg.hyper;
    let mut data = build_seed_data(cfg, seed)?;
    if blinded {
        for b in data.batches.iter_mut() {
            b.hidden_ys = None;
        }
    }
    let horizon = data.batches.len() as u64;
    let offline_mat = feature_matrix(&data.offline);
    let solver = SolverCfg::for_dim(h.dim);
    let buckets = bucket_lengths(horizon, cfg.min_len);
    let bucket_index: BTreeMap<u64, usize> =
        buckets.iter().enumerate().map(|(i, &l)| (l, i)).collect();

    let mut run_hyper = h.clone();
    run_hyper.horizon = horizon;
    let run_hyper = run_hyper.revalidate()?;

    let mut states: BTreeMap<Method, PerMethodState> = BTreeMap::new();
    for &m in &cfg.methods {
        let ensemble = match m {
            Method::Accous => Some(EnsembleState::new(
                run_hyper.clone(),
                spec,
                CoveringMode::Geometric { min_len: cfg.min_len },
            )),
            Method::Olre => Some(olre_estimator(run_hyper.clone(), spec)),
            _ => None,
        };
        let classifier = match m {
            Method::Fix => Some(fix_train(&data.offline, &solver)?),
            _ => None,
        };
        states.insert(m, PerMethodState { ensemble, classifier });
    }

    let mut records = Vec::with_capacity(horizon as usize);
    let mut accous_thetas: Vec<Array1<f64>> = Vec::new();
    for (i, batch) in data.batches.iter().enumerate() {
        let t = (i + 1) as u64;
        let batch_mat = xs_matrix(&batch.xs);
        let labeled: Option<Vec<LabeledSample>> = batch.hidden_ys.as_ref().map(|ys| {
            batch
                .xs
                .iter()
                .zip(ys)
                .map(|(x, &y)| LabeledSample { x: x.clone(), y })
                .collect()
        });
        let alpha = data.alphas.as_ref().map(|a| a[i]);

        let mut rec = RoundRecord {
            t,
            alpha,
            err_accous: None,
            err_olre: None,
            err_fix: None,
            err_ulsif: None,
            err_kliep: None,
            loss_hat: None,
            est_err: None,
            clip_count: 0,
            weight_mass: vec![0.0; buckets.len()],
        };

        for &m in &cfg.methods {
            let st = states.get_mut(&m).expect("state exists for configured method");
            // 1. The round's ratio model, built before the batch labels are
            //    touched (the online estimators emit their estimate before
            //    consuming the batch internally).
            let model: Option<RatioModel> = match m {
                Method::Accous | Method::Olre => {
                    let ens = st.ensemble.as_mut().expect("ensemble state");
                    let diag = ens.round(&offline_mat, t, &batch_mat)?;
                    if m == Method::Accous {
                        rec.loss_hat = Some(diag.loss_hat);
                        for (_, len, w) in &diag.weights {
                            // Rounds t < min_len run on the unfiltered
                            // fallback covering; those short lengths have no
                            // bucket and are left out of the heatmap.
                            if let Some(&bi) = bucket_index.get(len) {
                                rec.weight_mass[bi] += w;
                            }
                        }
                        if cfg.check_prop2 {
                            accous_thetas.push(diag.theta_hat.clone());
                        }
                    }
                    Some(ratio_model_from_theta(cfg.divergence, &diag.theta_hat, h.radius_s)?)
                }
                Method::Ulsif => {
                    Some(ulsif_fit(&offline_mat, &batch_mat, cfg.lambda_u, h.radius_s)?)
                }
                Method::Kliep => Some(kliep_fit(
                    &offline_mat,
                    &batch_mat,
                    cfg.kliep_steps,
                    cfg.kliep_step_size,
                    h.radius_s,
                )?),
                Method::Fix => None,
            };

            // 2. Train (warm-started per method) and predict.
            if let Some(model) = &model {
                let (weights, floored, capped) =
                    prepare_weights(model, &cfg.flatten, &data.offline, h.ratio_cap)?;
                let warm = st.classifier.as_ref();
                let trained = iwerm_train(&data.offline, &weights, warm, &solver)?;
                st.classifier = Some(trained);
                if m == Method::Accous {
                    rec.clip_count = (floored + capped) as u64;
                    if let (Some(mix), Some(a)) = (&data.mixture, alpha) {
                        let a0 = match &cfg.source {
                            DataSource::Synthetic { schedule, .. } => schedule.alpha0,
                            _ => unreachable!("mixture implies synthetic source"),
                        };
                        rec.est_err = Some(estimation_error(
                            model,
                            |x: &ArrayView1<f64>| true_ratio(mix, a, a0, x),
                            &offline_mat,
                        ));
                    }
                }
            }
            if let Some(lb) = &labeled {
                let c = st.classifier.as_ref().expect("classifier trained");
                let err = error_rate(c, lb)?;
                match m {
                    Method::Accous => rec.err_accous = Some(err),
                    Method::Olre => rec.err_olre = Some(err),
                    Method::Fix => rec.err_fix = Some(err),
                    Method::Ulsif => rec.err_ulsif = Some(err),
                    Method::Kliep => rec.err_kliep = Some(err),
                }
            }
        }
        records.push(rec);
    }

    // Summary metrics.
    let mut mean_err = BTreeMap::new();
    for &m in &cfg.methods {
        let vals: Vec<f64> = records
            .iter()
            .filter_map(|r| match m {
                Method::Accous => r.err_accous,
                Method::Olre => r.err_olre,
                Method::Fix => r.err_fix,
                Method::Ulsif => r.err_ulsif,
                Method::Kliep => r.err_kliep,
            })
            .collect();
        if !vals.is_empty() {
            mean_err.insert(m.name().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    let cumulative_est_err = {
        let s: f64 = records.iter().filter_map(|r| r.est_err).sum();
        if records.iter().any(|r| r.est_err.is_some()) { Some(s) } else { None }
    };

    let (prop2, variation) = match (&cfg.source, &data.alphas, &data.mixture) {
        (DataSource::Synthetic { schedule, .. }, Some(alphas), Some(mix)) => {
            let seeds = SeedSpec::new(seed);
            let mut rng_mc = seeds.stream("mc")?;
            let vv = Some(variation_v(alphas, mix, cfg.n_mc, &mut rng_mc)?);
            let p2 = if cfg.check_prop2 {
                let models: Vec<RatioModel> = accous_thetas
                    .iter()
                    .map(|th| ratio_model_from_theta(cfg.divergence, th, h.radius_s))
                    .collect::<Result<_>>()?;
                Some(check_prop2(
                    &models,
                    alphas,
                    mix,
                    schedule.alpha0,
                    &spec,
                    h.feature_bound_r,
                    cfg.n_mc,
                    &mut rng_mc,
                )?)
            } else {
                None
            };
            (p2, vv)
        }
        _ => (None, None),
    };

    let summary = SeedSummary {
        seed,
        mean_err,
        cumulative_est_err,
        prop2,
        variation_v: variation,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(SeedResult { seed, records, summary, bucket_lens: buckets })
}

/// Runs every seed; a failing seed aborts with a diagnostic naming it while
/// the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<SeedResult>, Aggregate)> {
    cfg.validate()?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, false) {
            Ok(r) => results.push(r),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    if results.is_empty() {
        return Err(Error::Numerical(format!("all seeds failed: {}", failures.join("; "))));
    }
    if !failures.is_empty() {
        eprintln!("warning: {} seed(s) failed: {}", failures.len(), failures.join("; "));
    }
    let mut mean_err = BTreeMap::new();
    let mut std_err = BTreeMap::new();
    for &m in &cfg.methods {
        let per_seed: Vec<f64> = results
            .iter()
            .filter_map(|r| r.summary.mean_err.get(m.name()).copied())
            .collect();
        if per_seed.is_empty() {
            continue;
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        mean_err.insert(m.name().to_string(), mean);
        std_err.insert(m.name().to_string(), var.sqrt());
    }
    let agg = Aggregate {
        mean_err,
        std_err,
        seeds: results.iter().map(|r| r.seed).collect(),
    };
    Ok((results, agg))
}

/// Ratio-coordinate loss integrands: the per-point offline and online terms
/// of the expected loss, as a function of the ratio value v > 0 (LS: any v).
/// Matches the parameter-space empirical loss exactly on its own models.
fn ratio_loss_terms(spec: &DivergenceSpec, v: f64) -> Result<(f64, f64)> {
    match spec.kind {
        DivergenceKind::Lr => {
            if v <= 0.0 {
                return Err(Error::Domain(format!("LR ratio must be positive, got {v}")));
            }
            Ok((0.5 * v.ln_1p(), 0.5 * (1.0 / v).ln_1p()))
        }
        DivergenceKind::Kl => {
            if v <= 0.0 {
                return Err(Error::Domain(format!("KL ratio must be positive, got {v}")));
            }
            Ok((v, -v.ln()))
        }
        DivergenceKind::Ls => Ok((0.5 * v * v + 0.5, -v)),
    }
}

fn clipped_component_sample<R: Rng>(
    g: &GaussianMixtureSpec,
    mean: &Array1<f64>,
    r_bound: f64,
    rng: &mut R,
) -> Array1<f64> {
    loop {
        let sd = g.cov_scale;
        let mut x = Array1::<f64>::zeros(g.dim);
        for (xi, mi) in x.iter_mut().zip(mean.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *xi = mi + sd * z;
        }
        if x.dot(&x).sqrt() <= r_bound {
            return x;
        }
    }
}

/// Empirical check of the estimation-error inequality
/// sum_t E_{D0}|r_hat - r*| <= sqrt((2T/mu) sum_t [L_t(r_hat) - L_t(r*)]),
/// with both sides Monte-Carlo estimated on fixed pools and a 1.1 slack on
/// the right-hand side.
#[allow(clippy::too_many_arguments)]
pub fn check_prop2<R: Rng>(
    models: &[RatioModel],
    alphas: &[f64],
    g: &GaussianMixtureSpec,
    alpha0: f64,
    spec: &DivergenceSpec,
    r_bound: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Prop2Check> {
    if models.len() != alphas.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models vs {} alphas",
            models.len(),
            alphas.len()
        )));
    }
    if n_mc < 1 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    // Fixed Monte-Carlo pools: D0 for the left side and the offline loss
    // term, one pool per mixture component for the online loss term
    // (E_{D_t}[f] = (1-alpha_t) E_{D'}[f] + alpha_t E_{D''}[f]).
    let pool0: Vec<Array1<f64>> = (0..n_mc)
        .map(|_| {
            let u: f64 = rng.gen();
            let mean = if u < alpha0 { &g.mean2 } else { &g.mean1 };
            clipped_component_sample(g, mean, r_bound, rng)
        })
        .collect();
    let pool1: Vec<Array1<f64>> =
        (0..n_mc).map(|_| clipped_component_sample(g, &g.mean1, r_bound, rng)).collect();
    let pool2: Vec<Array1<f64>> =
        (0..n_mc).map(|_| clipped_component_sample(g, &g.mean2, r_bound, rng)).collect();

    // Precompute per-pool true component densities once; the per-round true
    // ratio and each model's value then reduce to scalar work.
    let dens = |pool: &[Array1<f64>]| -> Vec<(f64, f64)> {
        pool.iter().map(|x| g.component_densities(&x.view())).collect()
    };
    let d0 = dens(&pool0);
    let d1 = dens(&pool1);
    let d2 = dens(&pool2);

    let t_total = models.len() as f64;
    let mut lhs = 0.0;
    let mut gap_sum = 0.0;
    for (model, &a) in models.iter().zip(alphas) {
        let r_star = |p: (f64, f64)| ((1.0 - a) * p.0 + a * p.1) / ((1.0 - alpha0) * p.0 + alpha0 * p.1);
        // Left side + offline loss terms on the D0 pool.
        let mut abs_dev = 0.0;
        let mut off_hat = 0.0;
        let mut off_star = 0.0;
        for (x, &p) in pool0.iter().zip(d0.iter()) {
            let v_hat = model.eval(&x.view());
            let v_star = r_star(p);
            abs_dev += (v_hat - v_star).abs();
            off_hat += ratio_loss_terms(spec, v_hat)?.0;
            off_star += ratio_loss_terms(spec, v_star)?.0;
        }
        lhs += abs_dev / n_mc as f64;
        // Online loss terms per component pool, mixed by alpha_t.
        let mut on = [0.0f64; 4]; // hat1, hat2, star1, star2
        for (x, &p) in pool1.iter().zip(d1.iter()) {
            on[0] += ratio_loss_terms(spec, model.eval(&x.view()))?.1;
            on[2] += ratio_loss_terms(spec, r_star(p))?.1;
        }
        for (x, &p) in pool2.iter().zip(d2.iter()) {
            on[1] += ratio_loss_terms(spec, model.eval(&x.view()))?.1;
            on[3] += ratio_loss_terms(spec, r_star(p))?.1;
        }
        let nm = n_mc as f64;
        let loss_hat = off_hat / nm + (1.0 - a) * on[0] / nm + a * on[1] / nm;
        let loss_star = off_star / nm + (1.0 - a) * on[2] / nm + a * on[3] / nm;
        gap_sum += loss_hat - loss_star;
    }
    let rhs = ((2.0 * t_total / spec.mu) * gap_sum.max(0.0)).sqrt();
    Ok(Prop2Check { lhs, rhs, holds: lhs <= 1.1 * rhs })
}

/// Time-window x dyadic-length table of mean meta-weight mass.
#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub bucket_lens: Vec<u64>,
    /// (window_start, window_end, mass per bucket).
    pub rows: Vec<(u64, u64, Vec<f64>)>,
}

pub fn weight_heatmap(records: &[RoundRecord], bucket_lens: &[u64], window: u64) -> Result<Heatmap> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut rows = Vec::new();
    let mut i = 0usize;
    while i < records.len() {
        let end = (i + window as usize).min(records.len());
        let mut mass = vec![0.0; bucket_lens.len()];
        for r in &records[i..end] {
            for (m, &w) in mass.iter_mut().zip(r.weight_mass.iter()) {
                *m += w;
            }
        }
        let n = (end - i) as f64;
        for m in mass.iter_mut() {
            *m /= n;
        }
        rows.push((records[i].t, records[end - 1].t, mass));
        i = end;
    }
    Ok(Heatmap { bucket_lens: bucket_lens.to_vec(), rows })
}

/// 9-significant-digit formatting shared by all emitters.
pub fn fmt_sig(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

/// Writes `rounds_<seed>.csv`, `summary.json`, and `heatmap.csv`.
pub fn emit_outputs(
    cfg: &ExperimentConfig,
    results: &[SeedResult],
    agg: &Aggregate,
    dir: &std::path::Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bucket_lens = results
        .first()
        .map(|r| r.bucket_lens.clone())
        .unwrap_or_default();
    for r in results {
        let path = dir.join(format!("rounds_{}.csv", r.seed));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let mut header = String::from(
            "t,alpha,err_accous,err_olre,err_fix,err_ulsif,err_kliep,loss_hat,est_err,clip_count",
        );
        for l in &r.bucket_lens {
            header.push_str(&format!(",w_len_{l}"));
        }
        writeln!(f, "{header}")?;
        for rec in &r.records {
            let mut row = format!(
                "{},{},{},{},{},{},{},{},{},{}",
                rec.t,
                fmt_opt(rec.alpha),
                fmt_opt(rec.err_accous),
                fmt_opt(rec.err_olre),
                fmt_opt(rec.err_fix),
                fmt_opt(rec.err_ulsif),
                fmt_opt(rec.err_kliep),
                fmt_opt(rec.loss_hat),
                fmt_opt(rec.est_err),
                rec.clip_count,
            );
            for w in &rec.weight_mass {
                row.push(',');
                row.push_str(&fmt_sig(*w));
            }
            writeln!(f, "{row}")?;
        }
    }

    // summary.json: aggregate, per-seed summaries, and the resolved config.
    let resolved = resolved_config_json(cfg);
    let build_id = format!("{:016x}", fnv64(resolved.to_string().as_bytes()));
    let doc = serde_json::json!({
        "build_id": build_id,
        "config": resolved,
        "aggregate": agg,
        "seeds": results.iter().map(|r| &r.summary).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")
        .map_err(Error::Io)?;

    // heatmap.csv (only meaningful when the ensemble method ran).
    if cfg.methods.contains(&Method::Accous) || cfg.methods.contains(&Method::Olre) {
        let window = match &cfg.source {
            DataSource::Synthetic { schedule, .. } => schedule.period_m.max(1),
            DataSource::Csv { .. } => 50,
        };
        let path = dir.join("heatmap.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let mut header = String::from("seed,window_start,window_end");
        for l in &bucket_lens {
            header.push_str(&format!(",w_len_{l}"));
        }
        writeln!(f, "{header}")?;
        for r in results {
            let hm = weight_heatmap(&r.records, &r.bucket_lens, window)?;
            for (s, e, mass) in &hm.rows {
                let mut row = format!("{},{},{}", r.seed, s, e);
                for m in mass {
                    row.push(',');
                    row.push_str(&fmt_sig(*m));
                }
                writeln!(f, "{row}")?;
            }
        }
    }
    Ok(())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

/// The fully resolved configuration for auditability / reproduction.
pub fn resolved_config_json(cfg: &ExperimentConfig) -> serde_json::Value {
    let source = match &cfg.source {
        DataSource::Synthetic { schedule, mixture } => serde_json::json!({
            "kind": "synthetic",
            "schedule": schedule,
            "mixture": {
                "mean1": mixture.mean1.to_vec(),
                "mean2": mixture.mean2.to_vec(),
                "cov_scale": mixture.cov_scale,
                "dim": mixture.dim,
            },
        }),
        DataSource::Csv { offline, stream } => serde_json::json!({
            "kind": "csv",
            "offline": offline.display().to_string(),
            "stream": stream.display().to_string(),
        }),
    };
    serde_json::json!({
        "hyper": cfg.hyper,
        "divergence": cfg.divergence,
        "gamma_flat": cfg.gamma_flat,
        "flatten": cfg.flatten,
        "methods": cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "seeds": cfg.seeds,
        "source": source,
        "min_len": cfg.min_len,
        "lambda_u": cfg.lambda_u,
        "kliep_steps": cfg.kliep_steps,
        "kliep_step_size": cfg.kliep_step_size,
        "check_prop2": cfg.check_prop2,
        "n_mc": cfg.n_mc,
    })
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
