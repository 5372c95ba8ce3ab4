//! Command-line interface: synthetic and CSV experiment runs plus the
//! executable invariant suites.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 invariant/check failure.

use accous::bregman::DivergenceKind;
use accous::config::{parse_config_file, HyperparamsConfig};
use accous::datagen::{GaussianMixtureSpec, ShiftPattern, ShiftSchedule};
use accous::harness::{emit_outputs, run_experiment, DataSource, ExperimentConfig, Method};
use accous::predictor::FlattenSpec;
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "accous", version, about = "Streaming covariate-shift adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the synthetic drifting-mixture benchmark.
    RunSynthetic(RunArgs),
    /// Run on precomputed feature CSVs (offline + stream).
    RunCsv(RunArgs),
    /// Run an invariant suite: props, prop2, or regret.
    Check(CheckArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Key=value config file; explicit flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shift pattern (synthetic): lin, squ, sin, or ber.
    #[arg(long)]
    pattern: Option<String>,
    /// Horizon T.
    #[arg(long = "T")]
    horizon: Option<u64>,
    /// Online batch size N_t.
    #[arg(long = "Nt")]
    n_online: Option<usize>,
    /// Offline sample count N0.
    #[arg(long = "N0")]
    n_offline: Option<usize>,
    /// Feature dimension d.
    #[arg(long = "d")]
    dim: Option<usize>,
    /// Parameter-norm bound S.
    #[arg(long = "S")]
    radius_s: Option<f64>,
    /// Feature-norm bound R (synthetic default: mixture rejection bound).
    #[arg(long = "R")]
    feature_bound_r: Option<f64>,
    /// ONS step size (default: 0.25, calibrated for the benchmark).
    #[arg(long)]
    gamma_ons: Option<f64>,
    /// ONS curvature regularizer.
    #[arg(long)]
    lambda_ons: Option<f64>,
    /// Importance-weight cap.
    #[arg(long)]
    cap: Option<f64>,
    /// Comma-separated master seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated methods from accous,olre,fix,ulsif,kliep.
    #[arg(long)]
    methods: Option<String>,
    /// Weight flattening: identity, power:G, or mixture:A.
    #[arg(long)]
    flatten: Option<String>,
    /// Divergence kind: lr, ls, or kl.
    #[arg(long)]
    divergence: Option<String>,
    /// Flattening exponent inside the ratio loss.
    #[arg(long)]
    gamma_flat: Option<f64>,
    /// Minimum covering-interval length.
    #[arg(long)]
    min_len: Option<u64>,
    /// Squ/Sin period M (default ceil(sqrt(T))).
    #[arg(long)]
    period_m: Option<u64>,
    /// Ber keep probability (default 1 - 1/sqrt(T)).
    #[arg(long)]
    keep_prob: Option<f64>,
    /// uLSIF ridge parameter.
    #[arg(long)]
    lambda_u: Option<f64>,
    /// KLIEP iteration count.
    #[arg(long)]
    kliep_steps: Option<usize>,
    /// KLIEP initial step size.
    #[arg(long)]
    kliep_step_size: Option<f64>,
    /// Run the estimation-error inequality check on each seed.
    #[arg(long)]
    check_prop2: bool,
    /// Monte-Carlo sample count for diagnostics.
    #[arg(long)]
    n_mc: Option<usize>,
    /// Offline CSV (run-csv).
    #[arg(long)]
    offline: Option<PathBuf>,
    /// Stream CSV (run-csv).
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Suite name: props, prop2, or regret.
    #[arg(long)]
    suite: String,
    /// Monte-Carlo sample count override (prop2 suite).
    #[arg(long)]
    n_mc: Option<usize>,
}

fn parse_from_map<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|e| format!("config key {key}={v:?}: {e}")),
        None => Ok(None),
    }
}

/// Fills unset CLI fields from the `--config` file; flags win.
fn merge_config(mut a: RunArgs) -> Result<RunArgs, String> {
    let Some(path) = a.config.clone() else { return Ok(a) };
    let map = parse_config_file(&path).map_err(|e| e.to_string())?;
    macro_rules! fill {
        ($field:ident, $key:expr) => {
            if a.$field.is_none() {
                a.$field = parse_from_map(&map, $key)?;
            }
        };
    }
    fill!(pattern, "pattern");
    fill!(horizon, "T");
    fill!(n_online, "Nt");
    fill!(n_offline, "N0");
    fill!(dim, "d");
    fill!(radius_s, "S");
    fill!(feature_bound_r, "R");
    fill!(gamma_ons, "gamma_ons");
    fill!(lambda_ons, "lambda_ons");
    fill!(cap, "cap");
    fill!(seeds, "seeds");
    fill!(methods, "methods");
    fill!(flatten, "flatten");
    fill!(divergence, "divergence");
    fill!(gamma_flat, "gamma_flat");
    fill!(min_len, "min_len");
    fill!(period_m, "period_m");
    fill!(keep_prob, "keep_prob");
    fill!(lambda_u, "lambda_u");
    fill!(kliep_steps, "kliep_steps");
    fill!(kliep_step_size, "kliep_step_size");
    fill!(n_mc, "n_mc");
    if !a.check_prop2 {
        if let Some(v) = parse_from_map::<bool>(&map, "check_prop2")? {
            a.check_prop2 = v;
        }
    }
    if a.offline.is_none() {
        a.offline = map.get("offline").map(PathBuf::from);
    }
    if a.stream.is_none() {
        a.stream = map.get("stream").map(PathBuf::from);
    }
    if a.out.is_none() {
        a.out = map.get("out").map(PathBuf::from);
    }
    Ok(a)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("bad {what} {p:?}: {e}")))
        .collect()
}

fn build_config(a: &RunArgs, csv: bool) -> Result<ExperimentConfig, String> {
    let dim = a.dim.unwrap_or(5);
    let mixture = GaussianMixtureSpec::benchmark(dim);
    let feature_bound_r = a.feature_bound_r.unwrap_or_else(|| mixture.feature_bound());
    let hyper = HyperparamsConfig {
        dim: Some(dim),
        radius_s: a.radius_s,
        feature_bound_r: Some(feature_bound_r),
        // Experiment runs default to the calibrated practical step size; the
        // theoretical 6(1+beta) (the Hyperparams default) is far too large to
        // learn anything at beta = e^{SR}.
        gamma_ons: a.gamma_ons.or(Some(0.25)),
        lambda_ons: a.lambda_ons,
        ratio_cap: a.cap,
        horizon: a.horizon,
        n_offline: a.n_offline,
        n_online: a.n_online,
        meta_norm_div: None,
    }
    .validate()
    .map_err(|e| e.to_string())?;

    let source = if csv {
        let offline = a.offline.clone().ok_or("run-csv requires --offline")?;
        let stream = a.stream.clone().ok_or("run-csv requires --stream")?;
        DataSource::Csv { offline, stream }
    } else {
        let pattern: ShiftPattern = a
            .pattern
            .as_deref()
            .ok_or("run-synthetic requires --pattern")?
            .parse()
            .map_err(|e: accous::Error| e.to_string())?;
        let mut schedule = ShiftSchedule::new(pattern, hyper.horizon);
        if let Some(m) = a.period_m {
            schedule.period_m = m;
        }
        if let Some(p) = a.keep_prob {
            schedule.keep_prob = p;
        }
        DataSource::Synthetic { schedule, mixture }
    };

    let methods: Vec<Method> = match &a.methods {
        Some(s) => parse_list(s, "method")?,
        None => Method::ALL.to_vec(),
    };
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![1, 2, 3, 4, 5],
    };
    let flatten: FlattenSpec = match &a.flatten {
        Some(s) => s.parse().map_err(|e: accous::Error| e.to_string())?,
        None => FlattenSpec::Identity,
    };
    let divergence = match a.divergence.as_deref() {
        None | Some("lr") => DivergenceKind::Lr,
        Some("ls") => DivergenceKind::Ls,
        Some("kl") => DivergenceKind::Kl,
        Some(other) => return Err(format!("unknown divergence {other:?}")),
    };

    let cfg = ExperimentConfig {
        hyper,
        divergence,
        gamma_flat: a.gamma_flat.unwrap_or(1.0),
        flatten,
        methods,
        seeds,
        source,
        min_len: a.min_len.unwrap_or(4),
        lambda_u: a.lambda_u.unwrap_or(0.1),
        kliep_steps: a.kliep_steps.unwrap_or(100),
        kliep_step_size: a.kliep_step_size.unwrap_or(1.0),
        check_prop2: a.check_prop2,
        n_mc: a.n_mc.unwrap_or(10_000),
        out_dir: a.out.clone(),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(a: RunArgs, csv: bool) -> Result<(), String> {
    let a = merge_config(a)?;
    let cfg = build_config(&a, csv)?;
    let (results, agg) = run_experiment(&cfg).map_err(|e| e.to_string())?;
    if let Some(dir) = &cfg.out_dir {
        emit_outputs(&cfg, &results, &agg, dir).map_err(|e| e.to_string())?;
        eprintln!("wrote outputs to {}", dir.display());
    }
    for (m, v) in &agg.mean_err {
        let sd = agg.std_err.get(m).copied().unwrap_or(0.0);
        println!("{m}: mean error {:.4} +- {:.4} over {} seed(s)", v, sd, agg.seeds.len());
    }
    for r in &results {
        if let Some(p2) = &r.summary.prop2 {
            println!(
                "seed {}: estimation-error bound lhs {:.4e} rhs {:.4e} holds={}",
                r.seed, p2.lhs, p2.rhs, p2.holds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap help/version output is a success, not a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match cli.cmd {
        Cmd::RunSynthetic(a) => match run(a, false) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::RunCsv(a) => match run(a, true) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::Check(a) => {
            let outcomes = match a.suite.as_str() {
                "prop2" => accous::checks::suite_prop2(a.n_mc.unwrap_or(10_000)),
                s => accous::checks::run_suite(s),
            };
            match outcomes {
                Ok(list) => {
                    let mut failed = false;
                    for o in &list {
                        println!("{}: {} ({})", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
                        failed |= !o.passed;
                    }
                    if failed {
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
