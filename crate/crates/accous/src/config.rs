//! Shared domain types, hyperparameter validation, and the deterministic
//! randomness contract used by every other module.

use crate::{Error, Result};
use ndarray::Array1;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Validated hyperparameters. Construct via [`HyperparamsConfig::validate`];
/// immutable afterwards and safe to share across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Feature dimension d.
    pub dim: usize,
    /// Parameter-norm bound S (density ratio parameters satisfy ||theta|| <= S).
    pub radius_s: f64,
    /// Maximum feature norm R.
    pub feature_bound_r: f64,
    /// beta = exp(S * R), recomputed on validation.
    pub beta: f64,
    /// ONS step-size gamma.
    pub gamma_ons: f64,
    /// ONS curvature regularizer lambda.
    pub lambda_ons: f64,
    /// Global importance-weight cap.
    pub ratio_cap: f64,
    /// Horizon T.
    pub horizon: u64,
    /// Offline sample count N0.
    pub n_offline: usize,
    /// Per-round online sample count N_t.
    pub n_online: usize,
    /// Divisor for the meta-learner regret signal; defaults to S * R.
    pub meta_norm_div: f64,
}

/// Raw hyperparameter values as read from a config file or CLI flags.
/// Unset fields take their documented defaults during validation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HyperparamsConfig {
    pub dim: Option<usize>,
    pub radius_s: Option<f64>,
    pub feature_bound_r: Option<f64>,
    pub gamma_ons: Option<f64>,
    pub lambda_ons: Option<f64>,
    pub ratio_cap: Option<f64>,
    pub horizon: Option<u64>,
    pub n_offline: Option<usize>,
    pub n_online: Option<usize>,
    pub meta_norm_div: Option<f64>,
}

impl HyperparamsConfig {
    /// Normalizes the raw values into a consistent [`Hyperparams`].
    ///
    /// Defaults: S = d/2, gamma = 6(1+beta), lambda = 1, ratio_cap = 100,
    /// N0 = 1000, N_t = 1.
    pub fn validate(&self) -> Result<Hyperparams> {
        let dim = self
            .dim
            .ok_or_else(|| Error::InvalidHyperparam("dim is required".into()))?;
        if dim == 0 {
            return Err(Error::InvalidHyperparam("dim must be positive".into()));
        }
        let radius_s = self.radius_s.unwrap_or(dim as f64 / 2.0);
        if radius_s.is_nan() || radius_s <= 0.0 {
            return Err(Error::InvalidHyperparam(format!(
                "radius_s must be positive, got {radius_s}"
            )));
        }
        let feature_bound_r = self
            .feature_bound_r
            .ok_or_else(|| Error::InvalidHyperparam("feature_bound_r is required".into()))?;
        if feature_bound_r.is_nan() || feature_bound_r <= 0.0 {
            return Err(Error::InvalidHyperparam(format!(
                "feature_bound_r must be positive, got {feature_bound_r}"
            )));
        }
        let beta = (radius_s * feature_bound_r).exp();
        let gamma_ons = self.gamma_ons.unwrap_or(6.0 * (1.0 + beta));
        if gamma_ons.is_nan() || gamma_ons <= 0.0 {
            return Err(Error::InvalidHyperparam("gamma_ons must be positive".into()));
        }
        let lambda_ons = self.lambda_ons.unwrap_or(1.0);
        if lambda_ons.is_nan() || lambda_ons <= 0.0 {
            return Err(Error::InvalidHyperparam("lambda_ons must be positive".into()));
        }
        let ratio_cap = self.ratio_cap.unwrap_or(100.0);
        if ratio_cap.is_nan() || ratio_cap < 1.0 {
            return Err(Error::InvalidHyperparam(format!(
                "ratio_cap must be >= 1, got {ratio_cap}"
            )));
        }
        let horizon = self.horizon.unwrap_or(10_000);
        if horizon == 0 {
            return Err(Error::InvalidHyperparam("horizon must be positive".into()));
        }
        let n_offline = self.n_offline.unwrap_or(1000);
        if n_offline == 0 {
            return Err(Error::InvalidHyperparam("n_offline must be positive".into()));
        }
        let n_online = self.n_online.unwrap_or(1);
        if n_online == 0 {
            return Err(Error::InvalidHyperparam("n_online must be positive".into()));
        }
        let meta_norm_div = self.meta_norm_div.unwrap_or(radius_s * feature_bound_r);
        if meta_norm_div.is_nan() || meta_norm_div <= 0.0 {
            return Err(Error::InvalidHyperparam("meta_norm_div must be positive".into()));
        }
        Ok(Hyperparams {
            dim,
            radius_s,
            feature_bound_r,
            beta,
            gamma_ons,
            lambda_ons,
            ratio_cap,
            horizon,
            n_offline,
            n_online,
            meta_norm_div,
        })
    }
}

impl Hyperparams {
    /// Revalidation is the identity on already-validated values.
    pub fn revalidate(&self) -> Result<Hyperparams> {
        HyperparamsConfig {
            dim: Some(self.dim),
            radius_s: Some(self.radius_s),
            feature_bound_r: Some(self.feature_bound_r),
            gamma_ons: Some(self.gamma_ons),
            lambda_ons: Some(self.lambda_ons),
            ratio_cap: Some(self.ratio_cap),
            horizon: Some(self.horizon),
            n_offline: Some(self.n_offline),
            n_online: Some(self.n_online),
            meta_norm_div: Some(self.meta_norm_div),
        }
        .validate()
    }

    /// Asserts the feature-norm contract on ingested data.
    pub fn check_feature_norm(&self, x: &Array1<f64>) -> Result<()> {
        let norm = x.dot(x).sqrt();
        if norm > self.feature_bound_r * (1.0 + 1e-9) {
            return Err(Error::Domain(format!(
                "feature norm {norm} exceeds bound R = {}",
                self.feature_bound_r
            )));
        }
        Ok(())
    }
}

/// A labeled offline sample with y in {-1, +1}.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub x: Array1<f64>,
    pub y: i8,
}

/// One round's unlabeled batch. `hidden_ys`, when present, is used only for
/// evaluating classification error and never reaches a training path.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub round: u64,
    pub xs: Vec<Array1<f64>>,
    pub hidden_ys: Option<Vec<i8>>,
}

/// Master seed plus labeled substream derivation. Identical seed and label
/// always yield the same stream; distinct labels yield independent streams.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec { master_seed }
    }

    /// Derives a deterministic independent stream for the given label.
    pub fn stream(&self, label: &str) -> Result<ChaCha12Rng> {
        if label.is_empty() {
            return Err(Error::InvalidArgument("stream label must be nonempty".into()));
        }
        // FNV-1a over the label, mixed with the master seed through
        // splitmix64 finalizers; stable across platforms and releases.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut z = self.master_seed ^ mix64(h);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            z = mix64(z.wrapping_add(0x9e3779b97f4a7c15));
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        Ok(ChaCha12Rng::from_seed(key))
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Parses a flat `key=value` config file (one pair per line, `#` comments).
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::RngCore;

    fn base() -> HyperparamsConfig {
        HyperparamsConfig {
            dim: Some(5),
            radius_s: Some(2.5),
            feature_bound_r: Some(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn beta_and_gamma_defaults() {
        let h = base().validate().unwrap();
        assert_relative_eq!(h.beta, (2.5f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(h.gamma_ons, 6.0 * (1.0 + (2.5f64).exp()), max_relative = 1e-12);
        assert_relative_eq!(h.beta, 12.182, max_relative = 1e-4);
        assert_relative_eq!(h.gamma_ons, 79.09, max_relative = 1e-3);
    }

    #[test]
    fn s_defaults_to_half_dim() {
        let mut cfg = base();
        cfg.radius_s = None;
        let h = cfg.validate().unwrap();
        assert_eq!(h.radius_s, 2.5);
    }

    #[test]
    fn rejects_degenerate_values() {
        let mut cfg = base();
        cfg.radius_s = Some(0.0);
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.ratio_cap = Some(0.5);
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.feature_bound_r = Some(-1.0);
        assert!(cfg.validate().is_err());

        let mut cfg = base();
        cfg.horizon = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn revalidation_is_identity() {
        let h = base().validate().unwrap();
        let h2 = h.revalidate().unwrap();
        assert_eq!(format!("{h:?}"), format!("{h2:?}"));
    }

    #[test]
    fn streams_are_deterministic_and_independent() {
        let seed = SeedSpec::new(42);
        let a: Vec<u64> = (0..8).map(|_| 0).collect::<Vec<_>>();
        let mut r1 = seed.stream("datagen").unwrap();
        let mut r2 = seed.stream("datagen").unwrap();
        let s1: Vec<u64> = a.iter().map(|_| r1.next_u64()).collect();
        let s2: Vec<u64> = a.iter().map(|_| r2.next_u64()).collect();
        assert_eq!(s1, s2);

        let mut r3 = seed.stream("solver").unwrap();
        let s3: Vec<u64> = a.iter().map(|_| r3.next_u64()).collect();
        assert_ne!(s1, s3);

        let mut r4 = SeedSpec::new(43).stream("datagen").unwrap();
        let s4: Vec<u64> = a.iter().map(|_| r4.next_u64()).collect();
        assert_ne!(s1, s4);
    }

    #[test]
    fn empty_label_rejected() {
        assert!(SeedSpec::new(1).stream("").is_err());
    }

    #[test]
    fn config_text_parses_and_rejects() {
        let m = parse_config_text("d = 5 # dim\n\n# comment\nS=2.5\n").unwrap();
        assert_eq!(m["d"], "5");
        assert_eq!(m["S"], "2.5");
        assert!(parse_config_text("not a pair\n").is_err());
    }
}
