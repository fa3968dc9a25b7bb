//! Byzantine-robust gradient aggregation.
//!
//! Three cooperating pieces: Multi-KRUM distance scoring (hard filter
//! against independent outliers), FoolsGold similarity down-weighting
//! (soft defense against act-alike sybils), and dataset-size-weighted
//! federated averaging. Multi-KRUM filters first on raw updates;
//! FoolsGold weights are applied to the survivors inside the average.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::ClientId;
use crate::nn::{GradientVector, ModelParams};

/// One client's contribution to a merge: the shared update, its
/// self-reported dataset size, and the round it was produced in.
#[derive(Debug, Clone)]
pub struct UpdateEntry {
    pub client_id: ClientId,
    pub round: u64,
    pub update: GradientVector,
    pub n_k: u64,
}

impl UpdateEntry {
    fn key(&self) -> UpdateKey {
        (self.client_id, self.round)
    }
}

/// Identifies an update inside a merge batch. A client appears at most
/// once per round, so the pair is unique.
pub type UpdateKey = (ClientId, u64);

/// The batch of updates a merge operates on.
#[derive(Debug, Clone)]
pub struct UpdateSet {
    entries: Vec<UpdateEntry>,
}

impl UpdateSet {
    pub fn new(entries: Vec<UpdateEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument {
                name: "entries",
                reason: "update set must be nonempty".into(),
            });
        }
        let fp = entries[0].update.fingerprint();
        for e in &entries {
            if e.update.fingerprint() != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp.to_string(),
                    actual: e.update.fingerprint().to_string(),
                });
            }
            if e.n_k == 0 {
                return Err(Error::InvalidArgument {
                    name: "n_k",
                    reason: "dataset-size claim must be >= 1".into(),
                });
            }
        }
        let mut keys: Vec<UpdateKey> = entries.iter().map(UpdateEntry::key).collect();
        keys.sort();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument {
                name: "entries",
                reason: "duplicate (client, round) in update set".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[UpdateEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Knobs for the merge-time defenses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefensePolicy {
    pub use_multikrum: bool,
    /// Byzantine bound f; the merge requires 2f + 2 < n.
    pub f: usize,
    pub use_foolsgold: bool,
    /// How many past rounds feed each FoolsGold accumulator; 0 = all.
    pub fg_history_rounds: usize,
    /// Confidence parameter of the FoolsGold logit squash.
    pub fg_kappa: f64,
    /// Ceiling on the self-reported n_k, bounding weight inflation.
    pub n_k_cap: u64,
}

impl Default for DefensePolicy {
    fn default() -> Self {
        Self {
            use_multikrum: false,
            f: 0,
            use_foolsgold: false,
            fg_history_rounds: 0,
            fg_kappa: 1.0,
            n_k_cap: u64::MAX,
        }
    }
}

impl DefensePolicy {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.fg_kappa.is_finite() || self.fg_kappa <= 0.0 {
            return Err(format!(
                "defense.fg_kappa: must be finite and > 0, got {}",
                self.fg_kappa
            ));
        }
        if self.n_k_cap == 0 {
            return Err("defense.n_k_cap: must be >= 1".into());
        }
        Ok(())
    }
}

/// One scored update.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUpdate {
    pub client_id: ClientId,
    pub round: u64,
    pub score: f64,
}

/// Multi-KRUM anomaly scores: for each update, the sum of squared L2
/// distances to its `n - f - 2` nearest other updates. Distance ties are
/// broken by ascending (client, round) key, so scores are deterministic.
///
/// Scores are returned sorted by (client, round).
pub fn multikrum_scores(s: &UpdateSet, f: usize) -> Result<Vec<ScoredUpdate>> {
    let n = s.len();
    if 2 * f + 2 >= n {
        return Err(Error::ByzantineBound { f, n });
    }
    let keep = n - f - 2;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = s.entries[i].update.squared_distance(&s.entries[j].update)?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut scores: Vec<ScoredUpdate> = (0..n)
        .map(|i| {
            let mut others: Vec<(f64, UpdateKey)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist[i * n + j], s.entries[j].key()))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let score = others.iter().take(keep).map(|(d, _)| d).sum();
            ScoredUpdate {
                client_id: s.entries[i].client_id,
                round: s.entries[i].round,
                score,
            }
        })
        .collect();
    scores.sort_by(|a, b| (a.client_id, a.round).cmp(&(b.client_id, b.round)));
    Ok(scores)
}

/// Result of the Multi-KRUM filter.
#[derive(Debug, Clone)]
pub struct MultikrumOutcome {
    /// The n - f updates with the lowest scores.
    pub selected: UpdateSet,
    /// Keys of the f rejected updates.
    pub rejected: Vec<UpdateKey>,
    /// All scores, sorted by (client, round).
    pub scores: Vec<ScoredUpdate>,
}

/// Keep the `n - f` updates with the lowest scores; report the rest.
/// Score ties are broken by ascending (client, round) key.
pub fn multikrum_select(s: &UpdateSet, f: usize) -> Result<MultikrumOutcome> {
    let scores = multikrum_scores(s, f)?;
    let n = s.len();
    let m = n - f;
    let mut ranked: Vec<&ScoredUpdate> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then((a.client_id, a.round).cmp(&(b.client_id, b.round)))
    });
    let keep_keys: Vec<UpdateKey> = ranked[..m]
        .iter()
        .map(|r| (r.client_id, r.round))
        .collect();
    let rejected: Vec<UpdateKey> = ranked[m..]
        .iter()
        .map(|r| (r.client_id, r.round))
        .collect();
    let selected: Vec<UpdateEntry> = s
        .entries
        .iter()
        .filter(|e| keep_keys.contains(&e.key()))
        .cloned()
        .collect();
    Ok(MultikrumOutcome {
        selected: UpdateSet::new(selected)?,
        rejected,
        scores,
    })
}

/// Per-client running history of shared updates, the input FoolsGold
/// reasons over.
#[derive(Debug, Clone, Default)]
pub struct FgHistory {
    window: usize,
    accumulators: BTreeMap<ClientId, Accumulator>,
}

#[derive(Debug, Clone)]
struct Accumulator {
    sum: Vec<f64>,
    recent: VecDeque<Vec<f64>>,
}

impl FgHistory {
    /// `window_rounds` = 0 keeps the full history.
    pub fn new(window_rounds: usize) -> Self {
        Self {
            window: window_rounds,
            accumulators: BTreeMap::new(),
        }
    }

    /// Fold one shared update into the client's accumulator.
    pub fn record(&mut self, client: ClientId, update: &GradientVector) {
        let acc = self
            .accumulators
            .entry(client)
            .or_insert_with(|| Accumulator {
                sum: vec![0.0; update.len()],
                recent: VecDeque::new(),
            });
        for (s, v) in acc.sum.iter_mut().zip(update.values()) {
            *s += v;
        }
        if self.window > 0 {
            acc.recent.push_back(update.values().to_vec());
            if acc.recent.len() > self.window {
                let old = acc.recent.pop_front().unwrap();
                for (s, v) in acc.sum.iter_mut().zip(&old) {
                    *s -= v;
                }
            }
        }
    }

    fn accumulator(&self, client: &ClientId) -> Option<&[f64]> {
        self.accumulators.get(client).map(|a| a.sum.as_slice())
    }

    /// Canonical FoolsGold weighting over the given participants.
    ///
    /// Pairwise cosine similarity of accumulated updates, per-client max
    /// similarity, pardoning rescale, `w = 1 - maxsim`, rescale by the max
    /// weight, then a logit squash clamped to [0, 1]. Clients without
    /// history (or with a zero-norm accumulator) contribute similarity 0.
    pub fn weights(&self, participants: &[ClientId], kappa: f64) -> BTreeMap<ClientId, f64> {
        let n = participants.len();
        let mut out = BTreeMap::new();
        if n == 0 {
            return out;
        }
        if n == 1 {
            out.insert(participants[0], 1.0);
            return out;
        }
        let norms: Vec<f64> = participants
            .iter()
            .map(|c| {
                self.accumulator(c)
                    .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0)
            })
            .collect();
        let mut cs = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let sim = match (self.accumulator(&participants[i]), self.accumulator(&participants[j])) {
                    (Some(a), Some(b)) if norms[i] > 0.0 && norms[j] > 0.0 => {
                        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j])
                    }
                    _ => 0.0,
                };
                cs[i * n + j] = sim;
                cs[j * n + i] = sim;
            }
        }
        let maxsim: Vec<f64> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| cs[i * n + j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        // Pardoning: scale down similarity toward clients that already look
        // more sybil-like than the current one.
        let mut wv: Vec<f64> = (0..n)
            .map(|i| {
                let m = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        if maxsim[j] > maxsim[i] && maxsim[j] > 0.0 {
                            cs[i * n + j] * maxsim[i] / maxsim[j]
                        } else {
                            cs[i * n + j]
                        }
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                (1.0 - m).clamp(0.0, 1.0)
            })
            .collect();
        let max_w = wv.iter().fold(0.0f64, |a, &b| a.max(b));
        if max_w <= 0.0 {
            for c in participants {
                out.insert(*c, 0.0);
            }
            return out;
        }
        for w in wv.iter_mut() {
            *w /= max_w;
            if *w >= 1.0 {
                *w = 0.99;
            }
            let squashed = kappa * ((*w / (1.0 - *w)).ln() + 0.5);
            *w = squashed.clamp(0.0, 1.0);
        }
        for (c, w) in participants.iter().zip(wv) {
            out.insert(*c, w);
        }
        out
    }
}

/// Outcome of a weighted federated average.
#[derive(Debug, Clone)]
pub struct AverageOutcome {
    pub global: ModelParams,
    /// Normalized effective weights, sorted by (client, round).
    pub effective_weights: Vec<(UpdateKey, f64)>,
}

/// Weighted federated averaging on top of `base`.
///
/// Each update's effective weight is `min(n_k, n_k_cap) * fg_weight`
/// (fg_weight 1 when absent), normalized to sum 1. The new global is
/// `base + sum(w_k * update_k)`.
pub fn federated_average(
    s: &UpdateSet,
    fg_weights: Option<&BTreeMap<ClientId, f64>>,
    base: &ModelParams,
    n_k_cap: u64,
) -> Result<AverageOutcome> {
    let fp = base.fingerprint();
    if s.entries[0].update.fingerprint() != fp {
        return Err(Error::FingerprintMismatch {
            expected: fp.to_string(),
            actual: s.entries[0].update.fingerprint().to_string(),
        });
    }
    let raw: Vec<f64> = s
        .entries
        .iter()
        .map(|e| {
            let fg = fg_weights
                .and_then(|m| m.get(&e.client_id).copied())
                .unwrap_or(1.0);
            (e.n_k.min(n_k_cap) as f64) * fg
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::MergeAborted);
    }
    let mut values = base.values().to_vec();
    for (e, w) in s.entries.iter().zip(&raw) {
        let wn = w / total;
        for (v, u) in values.iter_mut().zip(e.update.values()) {
            *v += wn * u;
        }
    }
    let mut effective_weights: Vec<(UpdateKey, f64)> = s
        .entries
        .iter()
        .zip(&raw)
        .map(|(e, w)| (e.key(), w / total))
        .collect();
    effective_weights.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(AverageOutcome {
        global: ModelParams::new(base.spec().clone(), values)?,
        effective_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelSpec, SpecFingerprint};

    fn cid(b: u8) -> ClientId {
        ClientId([b; 16])
    }

    fn scalar_set(values: &[f64]) -> UpdateSet {
        let fp = SpecFingerprint(1);
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &v)| UpdateEntry {
                client_id: cid(i as u8),
                round: 1,
                update: GradientVector::new(vec![v], fp).unwrap(),
                n_k: 1,
            })
            .collect();
        UpdateSet::new(entries).unwrap()
    }

    #[test]
    fn frozen_scalar_multikrum_scores() {
        // Independently computed: each score sums the 2 nearest squared
        // distances (n=5, f=1 -> n-f-2 = 2).
        let s = scalar_set(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let scores = multikrum_scores(&s, 1).unwrap();
        let expected = [
            0.05000000000000001,
            0.020000000000000004,
            0.019999999999999997,
            0.049999999999999989,
            190.13,
        ];
        for (got, want) in scores.iter().zip(expected) {
            assert!((got.score - want).abs() < 1e-9, "{} vs {want}", got.score);
        }
        let outlier = scores.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        assert_eq!(outlier.client_id, cid(4));
    }

    #[test]
    fn frozen_scalar_multikrum_selection_rejects_outlier() {
        let s = scalar_set(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let out = multikrum_select(&s, 1).unwrap();
        assert_eq!(out.selected.len(), 4);
        assert_eq!(out.rejected, vec![(cid(4), 1)]);
    }

    #[test]
    fn identical_updates_score_zero() {
        let s = scalar_set(&[0.7, 0.7, 0.7, 0.7, 0.7, 0.7]);
        for sc in multikrum_scores(&s, 1).unwrap() {
            assert_eq!(sc.score, 0.0);
        }
    }

    #[test]
    fn scores_invariant_under_permutation() {
        let base = scalar_set(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let mut entries = base.entries().to_vec();
        entries.reverse();
        entries.swap(1, 3);
        let permuted = UpdateSet::new(entries).unwrap();
        let a = multikrum_scores(&base, 1).unwrap();
        let b = multikrum_scores(&permuted, 1).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.client_id, y.client_id);
            assert_eq!(x.score, y.score);
        }
    }

    #[test]
    fn f_zero_selects_all() {
        let s = scalar_set(&[0.0, 1.0, 2.0]);
        let out = multikrum_select(&s, 0).unwrap();
        assert_eq!(out.selected.len(), 3);
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn selection_invariant_under_common_translation() {
        let a = scalar_set(&[0.0, 0.1, 0.2, 0.3, 10.0]);
        let shifted = scalar_set(&[5.0, 5.1, 5.2, 5.3, 15.0]);
        let ra = multikrum_select(&a, 1).unwrap();
        let rb = multikrum_select(&shifted, 1).unwrap();
        assert_eq!(ra.rejected, rb.rejected);
    }

    #[test]
    fn bound_violation_is_an_error() {
        let s = scalar_set(&[0.0, 1.0, 2.0, 3.0]);
        match multikrum_scores(&s, 1) {
            Err(Error::ByzantineBound { f, n }) => {
                assert_eq!((f, n), (1, 4));
            }
            other => panic!("expected bound error, got {other:?}"),
        }
    }

    fn fg_vec(values: Vec<f64>) -> GradientVector {
        GradientVector::new(values, SpecFingerprint(2)).unwrap()
    }

    #[test]
    fn identical_accumulators_get_zero_weight() {
        let mut h = FgHistory::new(0);
        h.record(cid(0), &fg_vec(vec![1.0, 2.0, 3.0]));
        h.record(cid(1), &fg_vec(vec![1.0, 2.0, 3.0]));
        let w = h.weights(&[cid(0), cid(1)], 1.0);
        assert!(w[&cid(0)] <= 0.01);
        assert!(w[&cid(1)] <= 0.01);
    }

    #[test]
    fn orthogonal_accumulators_get_full_weight() {
        let mut h = FgHistory::new(0);
        h.record(cid(0), &fg_vec(vec![1.0, 0.0, 0.0]));
        h.record(cid(1), &fg_vec(vec![0.0, 1.0, 0.0]));
        h.record(cid(2), &fg_vec(vec![0.0, 0.0, 1.0]));
        let w = h.weights(&[cid(0), cid(1), cid(2)], 1.0);
        for c in [cid(0), cid(1), cid(2)] {
            assert!(w[&c] >= 0.99, "weight {}", w[&c]);
        }
    }

    #[test]
    fn sybil_group_is_downweighted_honest_spared() {
        // 3 sybils share one direction (scaled copies), 5 honest clients are
        // mutually orthogonal. Verified against a reference run of the
        // canonical formula.
        let mut h = FgHistory::new(0);
        let dim = 10;
        for (i, scale) in [(0u8, 1.0), (1, 1.1), (2, 0.9)] {
            h.record(cid(i), &fg_vec(vec![scale; dim]));
        }
        for k in 0..5u8 {
            let mut v = vec![0.0; dim];
            v[k as usize] = 1.0;
            h.record(cid(3 + k), &fg_vec(v));
        }
        let ids: Vec<ClientId> = (0..8u8).map(cid).collect();
        let w = h.weights(&ids, 1.0);
        for i in 0..3u8 {
            assert!(w[&cid(i)] < 0.1, "sybil {} weight {}", i, w[&cid(i)]);
        }
        for i in 3..8u8 {
            assert!(w[&cid(i)] > 0.9, "honest {} weight {}", i, w[&cid(i)]);
        }
    }

    #[test]
    fn unknown_or_zero_history_treated_as_zero_similarity() {
        let mut h = FgHistory::new(0);
        h.record(cid(0), &fg_vec(vec![0.0, 0.0]));
        let w = h.weights(&[cid(0), cid(9)], 1.0);
        assert!(w[&cid(0)] >= 0.99);
        assert!(w[&cid(9)] >= 0.99);
    }

    #[test]
    fn duplicating_a_sybil_never_raises_sybil_weight() {
        let mut h = FgHistory::new(0);
        h.record(cid(0), &fg_vec(vec![1.0, 1.0, 0.0]));
        h.record(cid(1), &fg_vec(vec![1.0, 1.0, 0.0]));
        h.record(cid(2), &fg_vec(vec![0.0, 0.3, 0.8]));
        let before = h.weights(&[cid(0), cid(1), cid(2)], 1.0)[&cid(0)];
        h.record(cid(3), &fg_vec(vec![1.0, 1.0, 0.0]));
        let after = h.weights(&[cid(0), cid(1), cid(2), cid(3)], 1.0)[&cid(0)];
        assert!(after <= before + 1e-12);
    }

    #[test]
    fn history_window_evicts_old_updates() {
        let mut h = FgHistory::new(2);
        h.record(cid(0), &fg_vec(vec![10.0]));
        h.record(cid(0), &fg_vec(vec![1.0]));
        h.record(cid(0), &fg_vec(vec![2.0]));
        assert_eq!(h.accumulator(&cid(0)).unwrap(), &[3.0]);
    }

    fn base_and_set(values: &[(f64, u64)]) -> (ModelParams, UpdateSet) {
        let spec = ModelSpec::new(vec![1, 1]).unwrap();
        let base = ModelParams::new(spec.clone(), vec![1.0, 1.0]).unwrap();
        let entries = values
            .iter()
            .enumerate()
            .map(|(i, &(v, n_k))| UpdateEntry {
                client_id: cid(i as u8),
                round: 0,
                update: GradientVector::new(vec![v, 0.0], spec.fingerprint()).unwrap(),
                n_k,
            })
            .collect();
        (base, UpdateSet::new(entries).unwrap())
    }

    #[test]
    fn equal_sizes_give_plain_mean() {
        let (base, s) = base_and_set(&[(2.0, 10), (4.0, 10)]);
        let out = federated_average(&s, None, &base, u64::MAX).unwrap();
        assert!((out.global.values()[0] - 4.0).abs() < 1e-15); // 1 + mean(2,4)
    }

    #[test]
    fn sizes_weight_contributions() {
        let (base, s) = base_and_set(&[(1.0, 100), (2.0, 300)]);
        let out = federated_average(&s, None, &base, u64::MAX).unwrap();
        assert!((out.effective_weights[0].1 - 0.25).abs() < 1e-15);
        assert!((out.effective_weights[1].1 - 0.75).abs() < 1e-15);
        assert!((out.global.values()[0] - (1.0 + 0.25 + 1.5)).abs() < 1e-15);
    }

    #[test]
    fn single_update_full_weight_adds_update() {
        let (base, s) = base_and_set(&[(0.5, 7)]);
        let out = federated_average(&s, None, &base, u64::MAX).unwrap();
        assert!((out.global.values()[0] - 1.5).abs() < 1e-15);
        assert_eq!(out.global.fingerprint(), base.fingerprint());
    }

    #[test]
    fn all_zero_weights_abort_merge() {
        let (base, s) = base_and_set(&[(1.0, 5), (2.0, 5)]);
        let mut fg = BTreeMap::new();
        fg.insert(cid(0), 0.0);
        fg.insert(cid(1), 0.0);
        assert!(matches!(
            federated_average(&s, Some(&fg), &base, u64::MAX),
            Err(Error::MergeAborted)
        ));
    }

    #[test]
    fn n_k_cap_bounds_inflated_claims() {
        let (base, s) = base_and_set(&[(0.0, 1_000_000), (1.0, 100)]);
        let out = federated_average(&s, None, &base, 100).unwrap();
        assert!((out.effective_weights[0].1 - 0.5).abs() < 1e-15);
        assert!((out.effective_weights[1].1 - 0.5).abs() < 1e-15);
    }
}
