//! Online density-ratio estimator: geometric covering schedule, base-learner
//! lifecycle, and the Adapt-ML-Prod meta combination producing the combined
//! parameter each round.

use crate::bregman::{empirical_grad, empirical_loss, DivergenceSpec, RatioModel};
use crate::ons::{ons_init, OnsState};
use crate::{Error, Hyperparams, Result};
use ndarray::{Array1, Array2};

/// Learning-rate floor guarding the degenerate single-interval covering
/// (ln K = 0) and exponent-ratio divisions.
pub const EPS_FLOOR: f64 = 1e-8;

/// One interval of the geometric covering; length is 2^level and the start
/// index is a positive multiple of the length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoveringInterval {
    pub start: u64,
    pub end: u64,
    pub level: u32,
    pub id: u64,
}

impl CoveringInterval {
    /// Interval length in rounds; intervals are never empty (end >= start).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u64 {
        self.end - self.start + 1
    }
}

/// How the interval set is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoveringMode {
    /// Dyadic intervals, keeping only lengths >= min_len.
    Geometric { min_len: u64 },
    /// The single interval [1, T]; yields the full-history learner.
    Single,
}

/// Classification of covering intervals relative to a round.
#[derive(Debug, Clone)]
pub struct CoveringAt {
    pub active: Vec<CoveringInterval>,
    pub starting: Vec<CoveringInterval>,
    pub retiring: Vec<CoveringInterval>,
}

fn interval_at_level(t: u64, horizon: u64, level: u32) -> Option<CoveringInterval> {
    let len = 1u64 << level;
    let i = t / len;
    if i < 1 || i * len > horizon {
        return None;
    }
    let start = i * len;
    Some(CoveringInterval {
        start,
        end: start + len - 1,
        level,
        id: level as u64 * (horizon + 2) + start,
    })
}

/// Enumerates, per level with length >= min_len, the unique covering interval
/// containing round `t`, and classifies it as starting / retiring at `t`.
pub fn covering_at(t: u64, horizon: u64, min_len: u64) -> Result<CoveringAt> {
    if t < 1 || t > horizon {
        return Err(Error::InvalidArgument(format!(
            "round {t} outside horizon [1, {horizon}]"
        )));
    }
    let collect = |min: u64| {
        let mut active = Vec::new();
        let mut level = 0u32;
        while (1u64 << level) <= horizon {
            if (1u64 << level) >= min {
                if let Some(iv) = interval_at_level(t, horizon, level) {
                    active.push(iv);
                }
            }
            level += 1;
        }
        active
    };
    let mut active = collect(min_len);
    if active.is_empty() {
        // Rounds before the first interval of length min_len begins
        // (t < min_len) fall back to the unfiltered covering so the meta
        // learner always has at least one base model.
        active = collect(1);
    }
    let starting = active.iter().copied().filter(|iv| iv.start == t).collect();
    let retiring = active.iter().copied().filter(|iv| iv.end == t).collect();
    Ok(CoveringAt { active, starting, retiring })
}

/// Total number of covering intervals for the horizon under `mode`.
pub fn covering_count(horizon: u64, mode: CoveringMode) -> u64 {
    match mode {
        CoveringMode::Single => 1,
        CoveringMode::Geometric { min_len } => {
            let mut k = 0u64;
            let mut level = 0u32;
            while (1u64 << level) <= horizon {
                if (1u64 << level) >= min_len {
                    k += horizon / (1u64 << level);
                }
                level += 1;
            }
            k
        }
    }
}

/// Meta bookkeeping for one active base learner. The potential v is kept in
/// log space to survive long horizons without underflow.
#[derive(Debug, Clone)]
pub struct MetaEntry {
    pub interval: CoveringInterval,
    pub log_v: f64,
    pub eps: f64,
    pub sum_m_sq: f64,
    pub learner: OnsState,
}

/// Per-round diagnostics emitted by [`EnsembleState::round`].
#[derive(Debug, Clone)]
pub struct RoundDiag {
    pub theta_hat: Array1<f64>,
    pub loss_hat: f64,
    /// (interval level, interval length, weight) per active entry, id order.
    pub weights: Vec<(u32, u64, f64)>,
}

/// The full two-layer estimator state.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub entries: Vec<MetaEntry>,
    pub mode: CoveringMode,
    pub k_total: u64,
    pub ln_k: f64,
    pub round: u64,
    pub h: Hyperparams,
    pub spec: DivergenceSpec,
}

impl EnsembleState {
    pub fn new(h: Hyperparams, spec: DivergenceSpec, mode: CoveringMode) -> Self {
        let k_total = covering_count(h.horizon, mode);
        EnsembleState {
            entries: Vec::new(),
            mode,
            k_total,
            ln_k: (k_total as f64).ln(),
            round: 0,
            h,
            spec,
        }
    }

    /// Spawns the meta entry for an interval starting at the current round.
    pub fn spawn_entry(&mut self, interval: CoveringInterval) -> Result<()> {
        if self.entries.iter().any(|e| e.interval.id == interval.id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate spawn for interval [{}, {}]",
                interval.start, interval.end
            )));
        }
        let learner = ons_init((interval.start, interval.end), &self.h)?;
        let entry = MetaEntry {
            interval,
            log_v: -(self.k_total as f64).ln(),
            eps: self.ln_k.clamp(EPS_FLOOR, 0.5),
            sum_m_sq: 0.0,
            learner,
        };
        let pos = self
            .entries
            .binary_search_by_key(&interval.id, |e| e.interval.id)
            .unwrap_err();
        self.entries.insert(pos, entry);
        Ok(())
    }

    /// Meta weights p over the active entries: p_i proportional to eps_i v_i.
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("no active entries".into()));
        }
        if self.entries.len() == 1 {
            return Ok(vec![1.0]);
        }
        let logs: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.eps.ln() + e.log_v)
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("meta potentials degenerate".into()));
        }
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = unnorm.iter().sum();
        Ok(unnorm.iter().map(|u| u / sum).collect())
    }

    /// Combined prediction. A single active entry passes its parameter
    /// through bit-exactly.
    pub fn combine(&self) -> Result<Array1<f64>> {
        let p = self.weights()?;
        if self.entries.len() == 1 {
            return Ok(self.entries[0].learner.theta.clone());
        }
        let mut out = Array1::<f64>::zeros(self.h.dim);
        for (w, e) in p.iter().zip(self.entries.iter()) {
            out.scaled_add(*w, &e.learner.theta);
        }
        Ok(out)
    }

    /// Adapt-ML-Prod bookkeeping with the gradient taken at the combined
    /// parameter: per entry, m = <grad, combined - theta_i> / norm_div
    /// clamped to [-1, 1], then the learning rate and potential updates.
    pub fn meta_update(&mut self, grad_at_combined: &Array1<f64>, combined: &Array1<f64>) -> Result<()> {
        if grad_at_combined.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite meta gradient".into()));
        }
        let ln_k = self.ln_k;
        let norm_div = self.h.meta_norm_div;
        for e in self.entries.iter_mut() {
            let diff = combined - &e.learner.theta;
            let m = (grad_at_combined.dot(&diff) / norm_div).clamp(-1.0, 1.0);
            e.sum_m_sq += m * m;
            let eps_old = e.eps;
            let eps_new = (ln_k / (1.0 + e.sum_m_sq)).sqrt().clamp(EPS_FLOOR, 0.5);
            e.log_v = (eps_new / eps_old) * (e.log_v + (eps_old * m).ln_1p());
            e.eps = eps_new;
        }
        Ok(())
    }

    fn covering_for_round(&self, t: u64) -> Result<CoveringAt> {
        match self.mode {
            CoveringMode::Geometric { min_len } => covering_at(t, self.h.horizon, min_len),
            CoveringMode::Single => {
                let iv = CoveringInterval { start: 1, end: self.h.horizon, level: 0, id: 1 };
                Ok(CoveringAt {
                    active: vec![iv],
                    starting: if t == 1 { vec![iv] } else { vec![] },
                    retiring: if t == self.h.horizon { vec![iv] } else { vec![] },
                })
            }
        }
    }

    fn model_for(&self, theta: Array1<f64>) -> Result<RatioModel> {
        RatioModel::new(self.spec.required_link(), theta, self.h.radius_s + 1e-6)
    }

    /// One full round: spawn/retire per the covering, emit the combined
    /// parameter before touching the batch, then run the meta and base
    /// updates on the observed loss.
    pub fn round(&mut self, offline: &Array2<f64>, batch_round: u64, batch_xs: &Array2<f64>) -> Result<RoundDiag> {
        let t = self.round + 1;
        if batch_round != t {
            return Err(Error::InvalidArgument(format!(
                "out-of-order batch: expected round {t}, got {batch_round}"
            )));
        }
        let cov = self.covering_for_round(t)?;
        for iv in &cov.starting {
            self.spawn_entry(*iv)?;
        }
        let combined = self.combine()?;
        let p = self.weights()?;
        let weights: Vec<(u32, u64, f64)> = self
            .entries
            .iter()
            .zip(p.iter())
            .map(|(e, w)| (e.interval.level, e.interval.len(), *w))
            .collect();

        let combined_model = self.model_for(combined.clone())?;
        let loss_hat = empirical_loss(&self.spec, &combined_model, offline, batch_xs)?;
        let grad_combined = empirical_grad(&self.spec, &combined_model, offline, batch_xs)?;
        self.meta_update(&grad_combined, &combined)?;

        // Base updates use each learner's own gradient.
        let spec = self.spec;
        let link = spec.required_link();
        let bound = self.h.radius_s + 1e-6;
        for e in self.entries.iter_mut() {
            let model = RatioModel::new(link, e.learner.theta.clone(), bound)?;
            let grad = empirical_grad(&spec, &model, offline, batch_xs)?;
            e.learner.step(&grad)?;
        }

        self.entries.retain(|e| e.interval.end != t);
        self.round = t;
        Ok(RoundDiag { theta_hat: combined, loss_hat, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::DivergenceKind;
    use crate::config::HyperparamsConfig;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn hp(horizon: u64) -> Hyperparams {
        HyperparamsConfig {
            dim: Some(2),
            radius_s: Some(2.0),
            feature_bound_r: Some(1.5),
            gamma_ons: Some(1.0),
            horizon: Some(horizon),
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    fn spec(h: &Hyperparams) -> DivergenceSpec {
        DivergenceSpec::new(DivergenceKind::Lr, h.beta, 1.0).unwrap()
    }

    #[test]
    fn covering_reference_cases() {
        // t=4, T=8, min_len=1: [4,4], [4,5], [4,7], all starting.
        let c = covering_at(4, 8, 1).unwrap();
        let spans: Vec<(u64, u64)> = c.active.iter().map(|i| (i.start, i.end)).collect();
        assert_eq!(spans, vec![(4, 4), (4, 5), (4, 7)]);
        assert_eq!(c.starting.len(), 3);
        assert!(c.retiring.iter().map(|i| (i.start, i.end)).eq([(4, 4)]));

        // t=1: only the level-0 singleton exists.
        let c = covering_at(1, 8, 1).unwrap();
        let spans: Vec<(u64, u64)> = c.active.iter().map(|i| (i.start, i.end)).collect();
        assert_eq!(spans, vec![(1, 1)]);

        // t=6, min_len=4 filters lengths 1 and 2.
        let c = covering_at(6, 8, 4).unwrap();
        let spans: Vec<(u64, u64)> = c.active.iter().map(|i| (i.start, i.end)).collect();
        assert_eq!(spans, vec![(4, 7)]);

        assert!(covering_at(0, 8, 1).is_err());
        assert!(covering_at(9, 8, 1).is_err());
    }

    #[test]
    fn covering_covers_every_round_at_every_level() {
        let t_max = 4096u64;
        let mut level = 0u32;
        while (1u64 << level) <= t_max {
            let len = 1u64 << level;
            for t in len..=t_max {
                let c = covering_at(t, t_max, 1).unwrap();
                assert!(
                    c.active.iter().any(|iv| iv.level == level),
                    "round {t} uncovered at level {level}"
                );
            }
            level += 1;
        }
    }

    #[test]
    fn active_count_bounded() {
        let t_max = 4096u64;
        for t in 1..=t_max {
            let c = covering_at(t, t_max, 1).unwrap();
            let bound = (t as f64).log2().ceil() as usize + 1;
            assert!(c.active.len() <= bound, "t={t}: {} > {bound}", c.active.len());
        }
    }

    #[test]
    fn spawn_entry_initialization() {
        let h = hp(8);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
        // T=8, min_len=1: K = 8 + 4 + 2 + 1 = 15.
        assert_eq!(st.k_total, 15);
        let iv = covering_at(1, 8, 1).unwrap().active[0];
        st.spawn_entry(iv).unwrap();
        let e = &st.entries[0];
        assert_relative_eq!(e.log_v, -(15.0f64).ln(), max_relative = 1e-12);
        assert_abs_diff_eq!(e.eps, 0.5); // min(1/2, ln 15)
        assert_abs_diff_eq!(e.sum_m_sq, 0.0);
        assert!(st.spawn_entry(iv).is_err());
    }

    #[test]
    fn spawn_reference_values() {
        // K = 4: v = 1/4, eps = min(1/2, ln 4) = 1/2. K = 1: eps floored.
        let h = hp(4);
        let st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Single);
        assert_eq!(st.k_total, 1);
        let mut st = st;
        let iv = CoveringInterval { start: 1, end: 4, level: 0, id: 1 };
        st.spawn_entry(iv).unwrap();
        assert_abs_diff_eq!(st.entries[0].eps, EPS_FLOOR);
        assert_abs_diff_eq!(st.entries[0].log_v, 0.0);
    }

    #[test]
    fn combine_weight_normalization() {
        let h = hp(8);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
        for iv in covering_at(4, 8, 1).unwrap().starting {
            st.spawn_entry(iv).unwrap();
        }
        // eps v equal across fresh entries -> uniform weights.
        let p = st.weights().unwrap();
        assert_eq!(p.len(), 3);
        for w in &p {
            assert_relative_eq!(*w, 1.0 / 3.0, max_relative = 1e-12);
        }
        // Skewed potentials: eps v = (0.3, 0.1) -> p = (0.75, 0.25).
        st.entries.truncate(2);
        st.entries[0].eps = 0.5;
        st.entries[0].log_v = (0.6f64).ln();
        st.entries[1].eps = 0.5;
        st.entries[1].log_v = (0.2f64).ln();
        let p = st.weights().unwrap();
        assert_relative_eq!(p[0], 0.75, max_relative = 1e-10);
        assert_relative_eq!(p[1], 0.25, max_relative = 1e-10);
    }

    #[test]
    fn meta_update_reference() {
        // K = 4 analog: one entry, first update with m = 0.5.
        let h = hp(8);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
        st.k_total = 4;
        st.ln_k = (4.0f64).ln();
        let iv = covering_at(1, 8, 1).unwrap().active[0];
        st.spawn_entry(iv).unwrap();
        st.entries[0].log_v = (0.25f64).ln();
        st.entries[0].eps = 0.5;
        // Force m = 0.5: grad and diff chosen so <g, c - theta>/norm_div = 0.5.
        let combined = ndarray::array![1.0, 0.0];
        let grad = ndarray::array![0.5 * h.meta_norm_div, 0.0];
        st.meta_update(&grad, &combined).unwrap();
        let e = &st.entries[0];
        // eps_new = min(1/2, sqrt(ln4 / 1.25)) = 1/2; v = (0.25 * 1.25)^1.
        assert_abs_diff_eq!(e.eps, 0.5);
        assert_relative_eq!(e.log_v.exp(), 0.3125, max_relative = 1e-10);

        // Zero gradient leaves v and eps unchanged.
        let before = (e.log_v, e.eps, e.sum_m_sq);
        st.meta_update(&ndarray::Array1::zeros(2), &combined).unwrap();
        let e = &st.entries[0];
        assert_eq!((e.log_v, e.eps, e.sum_m_sq), before);
    }

    #[test]
    fn single_entry_has_zero_regret_signal() {
        let h = hp(8);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Single);
        let iv = CoveringInterval { start: 1, end: 8, level: 0, id: 1 };
        st.spawn_entry(iv).unwrap();
        let combined = st.combine().unwrap();
        assert_eq!(combined, st.entries[0].learner.theta);
        let grad = ndarray::array![0.7, -0.3];
        st.meta_update(&grad, &combined).unwrap();
        assert_abs_diff_eq!(st.entries[0].sum_m_sq, 0.0);
    }

    #[test]
    fn round_protocol_cold_start_and_determinism() {
        let h = hp(8);
        let offline = ndarray::arr2(&[[1.0, 0.2], [-0.5, 0.8], [0.3, -0.4]]);
        let b1 = ndarray::arr2(&[[0.4, 0.1]]);
        let b2 = ndarray::arr2(&[[-0.2, 0.6]]);

        let run = || -> Vec<Array1<f64>> {
            let mut st =
                EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
            let d1 = st.round(&offline, 1, &b1).unwrap();
            let d2 = st.round(&offline, 2, &b2).unwrap();
            vec![d1.theta_hat, d2.theta_hat]
        };
        let a = run();
        let b = run();
        // Cold start: round 1 combined parameter is the zero vector.
        assert_eq!(a[0], Array1::<f64>::zeros(2));
        // Determinism: bit-identical across executions.
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn out_of_order_batch_rejected() {
        let h = hp(8);
        let offline = ndarray::arr2(&[[1.0, 0.2]]);
        let b = ndarray::arr2(&[[0.4, 0.1]]);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
        assert!(st.round(&offline, 2, &b).is_err());
    }

    #[test]
    fn weights_stay_on_simplex_over_run() {
        let h = hp(64);
        let offline = ndarray::arr2(&[[1.0, 0.2], [-0.5, 0.8], [0.3, -0.4], [0.9, 0.9]]);
        let mut st = EnsembleState::new(h.clone(), spec(&h), CoveringMode::Geometric { min_len: 1 });
        for t in 1..=64u64 {
            let x = [[(t as f64 * 0.37).sin(), (t as f64 * 0.73).cos()]];
            let b = ndarray::arr2(&x);
            let diag = st.round(&offline, t, &b).unwrap();
            let sum: f64 = diag.weights.iter().map(|(_, _, w)| w).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
            assert!(diag.weights.iter().all(|(_, _, w)| *w >= 0.0));
            let bound = (t as f64).log2().ceil() as usize + 1;
            assert!(diag.weights.len() <= bound);
            // eps nonincreasing is enforced per entry by construction; check finiteness.
            for e in &st.entries {
                assert!(e.log_v.is_finite() && e.eps > 0.0);
            }
        }
    }
}
