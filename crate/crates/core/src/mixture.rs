//! Topic-level data mixture driven by per-topic validation perplexity.
//!
//! Each round the change in mean validation PPL per topic is normalized by
//! its largest magnitude, turned into a multiplicative adjustment
//! `f_i = max(floor, 1 + alpha * delta_i * w_i)` and applied to the previous
//! proportions, which are then renormalized. States are immutable values;
//! every step yields a new state plus an audit record.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_FLOOR: f64 = 0.05;
const SUM_TOLERANCE: f64 = 1e-9;

/// Mean validation perplexity per topic after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplSnapshot {
    pub round: u32,
    pub ppl: Vec<f64>,
}

/// On-disk form: `{"round": t, "ppl": {topic_label: number}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPplSnapshot {
    pub round: u32,
    pub ppl: BTreeMap<String, f64>,
}

impl PplSnapshot {
    pub fn new(round: u32, ppl: Vec<f64>) -> Result<Self> {
        let s = PplSnapshot { round, ppl };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.ppl.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::invalid(format!(
                    "snapshot round {}: ppl[{i}] = {p} is not a positive finite number",
                    self.round
                )));
            }
        }
        Ok(())
    }

    /// Orders a labeled snapshot by `topics`. Every topic must be present and
    /// no extra labels are allowed.
    pub fn from_labeled(labeled: &LabeledPplSnapshot, topics: &[String]) -> Result<Self> {
        let mut ppl = Vec::with_capacity(topics.len());
        for t in topics {
            let v = labeled.ppl.get(t).ok_or_else(|| {
                Error::invalid(format!("snapshot round {} has no value for topic {t:?}", labeled.round))
            })?;
            ppl.push(*v);
        }
        if let Some(extra) = labeled.ppl.keys().find(|k| !topics.contains(k)) {
            return Err(Error::invalid(format!(
                "snapshot round {} has unknown topic {extra:?}",
                labeled.round
            )));
        }
        Self::new(labeled.round, ppl)
    }

    pub fn to_labeled(&self, topics: &[String]) -> LabeledPplSnapshot {
        LabeledPplSnapshot {
            round: self.round,
            ppl: topics.iter().cloned().zip(self.ppl.iter().copied()).collect(),
        }
    }

    pub fn load(path: &Path, topics: &[String]) -> Result<Self> {
        let labeled: LabeledPplSnapshot = util::read_json(path)?;
        Self::from_labeled(&labeled, topics).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Per-topic sampling proportions plus the adjustment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub round: u32,
    pub topics: Vec<String>,
    pub proportions: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub floor: f64,
}

impl MixtureState {
    pub fn new(topics: Vec<String>, proportions: Vec<f64>, weights: Vec<f64>, alpha: f64, floor: f64) -> Result<Self> {
        let s = MixtureState {
            round: 0,
            topics,
            proportions,
            weights,
            alpha,
            floor,
        };
        s.validate()?;
        Ok(s)
    }

    /// Uniform proportions, unit weights, default alpha and floor.
    pub fn uniform(topics: Vec<String>) -> Self {
        let n = topics.len().max(1);
        MixtureState {
            round: 0,
            proportions: vec![1.0 / n as f64; topics.len()],
            weights: vec![1.0; topics.len()],
            topics,
            alpha: DEFAULT_ALPHA,
            floor: DEFAULT_FLOOR,
        }
    }

    /// Proportions from raw non-negative masses (e.g. token counts).
    pub fn from_masses(topics: Vec<String>, masses: &[f64], alpha: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("topic masses must have a positive finite sum"));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; topics.len()]);
        Self::new(
            topics,
            masses.iter().map(|m| m / total).collect(),
            weights,
            alpha,
            DEFAULT_FLOOR,
        )
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.proportions.len();
        if n == 0 {
            return Err(Error::invalid("mixture state has no topics"));
        }
        if self.weights.len() != n || self.topics.len() != n {
            return Err(Error::invalid(format!(
                "mixture state length mismatch: {} topics, {} proportions, {} weights",
                self.topics.len(),
                n,
                self.weights.len()
            )));
        }
        if self.proportions.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid("proportions must be finite and >= 0"));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("proportions sum to {sum}, expected 1")));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and >= 0"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be finite and >= 0"));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(Error::invalid("floor must be finite and > 0"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: MixtureState = util::read_json(path)?;
        s.validate().map_err(|e| e.context(path.display().to_string()))?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json_pretty(path, self)
    }
}

/// `delta_p[i] = cur[i] - prev[i]`.
pub fn performance_change(prev: &PplSnapshot, cur: &PplSnapshot) -> Result<Vec<f64>> {
    if prev.ppl.len() != cur.ppl.len() {
        return Err(Error::invalid(format!(
            "snapshot length mismatch: {} vs {}",
            prev.ppl.len(),
            cur.ppl.len()
        )));
    }
    if cur.round != prev.round + 1 {
        return Err(Error::invalid(format!(
            "snapshots are not consecutive: round {} then {}",
            prev.round, cur.round
        )));
    }
    prev.validate()?;
    cur.validate()?;
    Ok(cur.ppl.iter().zip(&prev.ppl).map(|(c, p)| c - p).collect())
}

/// Scales by the largest absolute change. All-zero input stays zero.
pub fn normalize_change(delta_p: &[f64]) -> Vec<f64> {
    let max_abs = delta_p.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max_abs == 0.0 {
        return vec![0.0; delta_p.len()];
    }
    delta_p.iter().map(|d| d / max_abs).collect()
}

pub fn adjustment_coefficients(delta: &[f64], state: &MixtureState) -> Result<Vec<f64>> {
    if delta.len() != state.len() {
        return Err(Error::invalid(format!(
            "delta has {} entries, state has {} topics",
            delta.len(),
            state.len()
        )));
    }
    Ok(delta
        .iter()
        .zip(&state.weights)
        .map(|(d, w)| (1.0 + state.alpha * d * w).max(state.floor))
        .collect())
}

/// Reweights proportions by `f` and renormalizes; advances the round.
///
/// A uniform `f` leaves proportions bit-identical (the renormalization is
/// the identity there, and skipping it avoids rounding drift).
pub fn update_proportions(state: &MixtureState, f: &[f64]) -> Result<MixtureState> {
    if f.len() != state.len() {
        return Err(Error::invalid(format!(
            "f has {} entries, state has {} topics",
            f.len(),
            state.len()
        )));
    }
    if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::invalid("adjustment coefficients must be finite and > 0"));
    }
    let mut next = state.clone();
    next.round = state.round + 1;
    if f.iter().all(|x| *x == f[0]) {
        return Ok(next);
    }
    let weighted: Vec<f64> = state.proportions.iter().zip(f).map(|(r, x)| r * x).collect();
    let denom: f64 = weighted.iter().sum();
    assert!(denom > 0.0, "proportions sum to 1 and f > 0, so the denominator is positive");
    next.proportions = weighted.iter().map(|x| x / denom).collect();
    Ok(next)
}

/// One round of the mixture state machine, as persisted to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub round: u32,
    pub delta_p: Vec<f64>,
    pub delta_norm: Vec<f64>,
    pub f: Vec<f64>,
    pub r_prev: Vec<f64>,
    pub r_new: Vec<f64>,
}

pub fn mixture_step(state: &MixtureState, prev: &PplSnapshot, cur: &PplSnapshot) -> Result<(MixtureState, AuditRecord)> {
    state.validate()?;
    let delta_p = performance_change(prev, cur)?;
    let delta_norm = normalize_change(&delta_p);
    let f = adjustment_coefficients(&delta_norm, state)?;
    let next = update_proportions(state, &f)?;
    let audit = AuditRecord {
        round: next.round,
        delta_p,
        delta_norm,
        f,
        r_prev: state.proportions.clone(),
        r_new: next.proportions.clone(),
    };
    Ok((next, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topics(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn two_topic_state() -> MixtureState {
        MixtureState::new(topics(2), vec![0.5, 0.5], vec![1.0, 1.0], 0.5, DEFAULT_FLOOR).unwrap()
    }

    #[test]
    fn performance_change_examples() {
        let prev = PplSnapshot::new(0, vec![10.0, 10.0]).unwrap();
        let cur = PplSnapshot::new(1, vec![8.0, 12.0]).unwrap();
        assert_eq!(performance_change(&prev, &cur).unwrap(), vec![-2.0, 2.0]);
        let same = PplSnapshot::new(1, vec![10.0, 10.0]).unwrap();
        assert_eq!(performance_change(&prev, &same).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn performance_change_errors() {
        let prev = PplSnapshot::new(0, vec![10.0, 10.0]).unwrap();
        let short = PplSnapshot::new(1, vec![10.0]).unwrap();
        assert!(performance_change(&prev, &short).is_err());
        let skip = PplSnapshot::new(2, vec![10.0, 10.0]).unwrap();
        assert!(performance_change(&prev, &skip).is_err());
        assert!(PplSnapshot::new(0, vec![0.0]).is_err());
        assert!(PplSnapshot::new(0, vec![f64::NAN]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_change(&[-2.0, 2.0]), vec![-1.0, 1.0]);
        assert_eq!(normalize_change(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        // max-abs is 4
        assert_eq!(normalize_change(&[1.0, -4.0, 2.0]), vec![0.25, -1.0, 0.5]);
    }

    #[test]
    fn coefficient_examples() {
        let s = two_topic_state();
        assert_eq!(adjustment_coefficients(&[-1.0, 1.0], &s).unwrap(), vec![0.5, 1.5]);
        assert_eq!(adjustment_coefficients(&[0.0, 0.0], &s).unwrap(), vec![1.0, 1.0]);
        let clamp = MixtureState::new(topics(1), vec![1.0], vec![1.0], 2.0, 0.05).unwrap();
        assert_eq!(adjustment_coefficients(&[-1.0], &clamp).unwrap(), vec![0.05]);
    }

    #[test]
    fn update_examples() {
        let s = two_topic_state();
        let next = update_proportions(&s, &[0.5, 1.5]).unwrap();
        assert_eq!(next.proportions, vec![0.25, 0.75]);
        assert_eq!(next.round, 1);
        let same = update_proportions(&s, &[1.0, 1.0]).unwrap();
        assert_eq!(same.proportions, s.proportions);
        assert!(update_proportions(&s, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn worked_two_topic_step() {
        let prev = PplSnapshot::new(0, vec![10.0, 10.0]).unwrap();
        let cur = PplSnapshot::new(1, vec![8.0, 12.0]).unwrap();
        let (next, audit) = mixture_step(&two_topic_state(), &prev, &cur).unwrap();
        assert_eq!(next.proportions, vec![0.25, 0.75]);
        assert_eq!(audit.delta_p, vec![-2.0, 2.0]);
        assert_eq!(audit.delta_norm, vec![-1.0, 1.0]);
        assert_eq!(audit.f, vec![0.5, 1.5]);
        assert_eq!(audit.r_prev, vec![0.5, 0.5]);
        assert_eq!(audit.round, 1);
    }

    #[test]
    fn labeled_snapshot_mapping() {
        let t = topics(2);
        let mut ppl = BTreeMap::new();
        ppl.insert("t1".to_string(), 3.0);
        ppl.insert("t0".to_string(), 2.0);
        let s = PplSnapshot::from_labeled(&LabeledPplSnapshot { round: 4, ppl: ppl.clone() }, &t).unwrap();
        assert_eq!(s.ppl, vec![2.0, 3.0]);
        ppl.insert("t9".to_string(), 1.0);
        assert!(PplSnapshot::from_labeled(&LabeledPplSnapshot { round: 4, ppl }, &t).is_err());
    }

    #[test]
    fn state_validation() {
        assert!(MixtureState::new(topics(2), vec![0.5, 0.6], vec![1.0, 1.0], 0.5, 0.05).is_err());
        assert!(MixtureState::new(topics(2), vec![0.5, 0.5], vec![1.0], 0.5, 0.05).is_err());
        assert!(MixtureState::new(topics(2), vec![0.5, 0.5], vec![1.0, 1.0], -0.1, 0.05).is_err());
        assert!(MixtureState::new(topics(2), vec![0.5, 0.5], vec![1.0, 1.0], 0.5, 0.0).is_err());
    }

    fn instance(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (
            prop::collection::vec(0.01f64..1.0, n),
            prop::collection::vec(0.0f64..2.0, n),
            prop::collection::vec(1.0f64..50.0, n),
            prop::collection::vec(1.0f64..50.0, n),
            0.0f64..2.0,
        )
    }

    fn state_from(masses: &[f64], w: Vec<f64>, alpha: f64) -> MixtureState {
        MixtureState::from_masses(topics(masses.len()), masses, alpha, Some(w)).unwrap()
    }

    proptest! {
        #[test]
        fn proportions_stay_a_distribution(
            (m, w, p0, p1, alpha) in (1usize..16).prop_flat_map(instance),
            rounds in 1usize..6,
        ) {
            let mut s = state_from(&m, w, alpha);
            let mut prev = PplSnapshot::new(0, p0.clone()).unwrap();
            for t in 1..=rounds {
                let ppl: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| if t % 2 == 0 { *a } else { *b + a / 3.0 }).collect();
                let cur = PplSnapshot::new(t as u32, ppl).unwrap();
                s = mixture_step(&s, &prev, &cur).unwrap().0;
                prev = cur;
                let sum: f64 = s.proportions.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!(s.proportions.iter().all(|r| *r >= 0.0));
            }
        }

        #[test]
        fn alpha_zero_is_identity((m, w, p0, p1, _a) in (1usize..16).prop_flat_map(instance)) {
            let s = state_from(&m, w, 0.0);
            let prev = PplSnapshot::new(0, p0).unwrap();
            let cur = PplSnapshot::new(1, p1).unwrap();
            let (next, _) = mixture_step(&s, &prev, &cur).unwrap();
            prop_assert_eq!(next.proportions, s.proportions);
        }

        #[test]
        fn f_is_monotone_in_delta(
            (m, _w, p0, p1, alpha) in (2usize..16).prop_flat_map(instance),
        ) {
            let n = m.len();
            let s = state_from(&m, vec![1.0; n], alpha);
            let prev = PplSnapshot::new(0, p0).unwrap();
            let cur = PplSnapshot::new(1, p1).unwrap();
            let (next, audit) = mixture_step(&s, &prev, &cur).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if audit.delta_norm[i] > audit.delta_norm[j] {
                        prop_assert!(audit.f[i] >= audit.f[j]);
                        // relative growth follows f
                        let gi = next.proportions[i] / s.proportions[i];
                        let gj = next.proportions[j] / s.proportions[j];
                        prop_assert!(gi >= gj * (1.0 - 1e-12));
                    }
                }
            }
        }

        #[test]
        fn scaling_change_leaves_step_unchanged(
            dp in prop::collection::vec(-10.0f64..10.0, 1..16),
            exp in -8i32..8,
            c in 0.001f64..1000.0,
        ) {
            let pow2 = 2f64.powi(exp);
            let scaled: Vec<f64> = dp.iter().map(|d| d * pow2).collect();
            prop_assert_eq!(normalize_change(&dp), normalize_change(&scaled));
            let general: Vec<f64> = dp.iter().map(|d| d * c).collect();
            for (a, b) in normalize_change(&dp).iter().zip(normalize_change(&general)) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn normalized_change_is_bounded(dp in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let d = normalize_change(&dp);
            prop_assert!(d.iter().all(|x| x.abs() <= 1.0));
            if dp.iter().any(|x| *x != 0.0) {
                prop_assert!(d.iter().any(|x| x.abs() == 1.0));
            }
        }
    }
}
