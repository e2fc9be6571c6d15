//! Turning attribution maps into neuron sets.
//!
//! Coarse thresholding keeps neurons with scores strictly above `t`;
//! adaptive thresholding keeps neurons within a fraction of the map's
//! maximum; refinement keeps neurons supported by enough of a fact's
//! prompts. Negative scores are never selectable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};

/// Identifier of one feed-forward neuron.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct NeuronRef {
    pub layer: usize,
    pub index: usize,
}

/// How a coarse/adaptive threshold and the multi-prompt criterion combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementPolicy {
    pub mode: ThresholdMode,
    /// Share of prompts (percent, `0..=100`) that must support a neuron.
    pub support_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Keep scores strictly greater than `t >= 0`.
    AbsoluteT { t: f64 },
    /// Keep scores at or above `fraction * max(map)`, `0 < fraction <= 1`.
    AdaptiveFraction { fraction: f64 },
}

impl RefinementPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ThresholdMode::AbsoluteT { t } => {
                if !t.is_finite() || t < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "absolute threshold t={t} must be finite and >= 0"
                    )));
                }
            }
            ThresholdMode::AdaptiveFraction { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "adaptive fraction {fraction} outside (0, 1]"
                    )));
                }
            }
        }
        if !(0.0..=100.0).contains(&self.support_percent) {
            return Err(Error::InvalidArgument(format!(
                "support percentage {} outside [0, 100]",
                self.support_percent
            )));
        }
        Ok(())
    }

    /// Apply the threshold half of the policy to one map.
    pub fn select(&self, map: &AttributionMap) -> Result<NeuronSet> {
        match self.mode {
            ThresholdMode::AbsoluteT { t } => coarse_select(map, t),
            ThresholdMode::AdaptiveFraction { fraction } => adaptive_select(map, fraction),
        }
    }
}

/// A set of neurons with, per member, the number of supporting prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeuronSet {
    members: BTreeMap<NeuronRef, u32>,
}

impl NeuronSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_refs<I: IntoIterator<Item = NeuronRef>>(refs: I) -> Self {
        let mut set = Self::new();
        for n in refs {
            set.insert(n);
        }
        set
    }

    /// Add a member with support count 1 (idempotent on membership; support
    /// saturates at the number of insertions).
    pub fn insert(&mut self, n: NeuronRef) {
        *self.members.entry(n).or_insert(0) += 1;
    }

    pub fn contains(&self, n: &NeuronRef) -> bool {
        self.members.contains_key(n)
    }

    pub fn support(&self, n: &NeuronRef) -> u32 {
        self.members.get(n).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Members in (layer, index) order.
    pub fn iter(&self) -> impl Iterator<Item = (&NeuronRef, &u32)> {
        self.members.iter()
    }

    pub fn refs(&self) -> impl Iterator<Item = &NeuronRef> {
        self.members.keys()
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self {
            members: self
                .members
                .iter()
                .filter(|(n, _)| other.contains(n))
                .map(|(n, c)| (*n, *c))
                .collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut members = self.members.clone();
        for (n, _) in other.iter() {
            members.entry(*n).or_insert(1);
        }
        Self { members }
    }

    /// Members of exactly one of the two sets.
    pub fn symmetric_difference(&self, other: &Self) -> Self {
        let mut members = BTreeMap::new();
        for (n, c) in self.iter() {
            if !other.contains(n) {
                members.insert(*n, *c);
            }
        }
        for (n, c) in other.iter() {
            if !self.contains(n) {
                members.insert(*n, *c);
            }
        }
        Self { members }
    }

    /// The member that would be reported as "the" maximal neuron under the
    /// deterministic tie-break: lowest layer first, then lowest index.
    pub fn first(&self) -> Option<NeuronRef> {
        self.members.keys().next().copied()
    }
}

impl FromIterator<NeuronRef> for NeuronSet {
    fn from_iter<I: IntoIterator<Item = NeuronRef>>(iter: I) -> Self {
        Self::from_refs(iter)
    }
}

/// Neurons with score strictly greater than `t` (requires `t >= 0`, so
/// negative scores never qualify).
pub fn coarse_select(map: &AttributionMap, t: f64) -> Result<NeuronSet> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "coarse threshold t={t} must be finite and >= 0"
        )));
    }
    let mut set = NeuronSet::new();
    for (layer, row) in map.computed_rows() {
        for (index, &score) in row.iter().enumerate() {
            if score > t {
                set.insert(NeuronRef { layer, index });
            }
        }
    }
    Ok(set)
}

/// Neurons with score at or above `fraction * max(map)`, the maximum taken
/// over all computed entries of this map.
pub fn adaptive_select(map: &AttributionMap, fraction: f64) -> Result<NeuronSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "adaptive fraction {fraction} outside (0, 1]"
        )));
    }
    let max = map.global_max().ok_or_else(|| {
        Error::DegenerateMap("adaptive selection on a map with no computed layers".into())
    })?;
    if max.is_nan() || max <= 0.0 {
        return Err(Error::DegenerateMap(format!(
            "adaptive selection needs a positive maximum score, found {max}"
        )));
    }
    let cut = fraction * max;
    let mut set = NeuronSet::new();
    for (layer, row) in map.computed_rows() {
        for (index, &score) in row.iter().enumerate() {
            if score >= cut {
                set.insert(NeuronRef { layer, index });
            }
        }
    }
    Ok(set)
}

/// Keep neurons supported by at least `ceil(P * n / 100)` of the `n` input
/// sets. `P = 100` is the intersection; `P -> 0` the union.
pub fn refine(sets: &[NeuronSet], support_percent: f64) -> Result<NeuronSet> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument(
            "refine needs at least one neuron set".into(),
        ));
    }
    if !(0.0..=100.0).contains(&support_percent) {
        return Err(Error::InvalidArgument(format!(
            "support percentage {support_percent} outside [0, 100]"
        )));
    }
    let n = sets.len();
    // The 1e-9 slack absorbs upward float drift when P*n/100 lands on an
    // integer; it never changes which integer is reached otherwise.
    let required = ((support_percent * n as f64) / 100.0 - 1e-9).ceil().max(0.0) as u32;

    let mut counts: BTreeMap<NeuronRef, u32> = BTreeMap::new();
    for set in sets {
        for n in set.refs() {
            *counts.entry(*n).or_insert(0) += 1;
        }
    }
    let mut out = NeuronSet::new();
    for (neuron, count) in counts {
        if count >= required {
            out.members.insert(neuron, count);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionMap;
    use ndarray::array;

    fn map_from(rows: ndarray::Array2<f64>) -> AttributionMap {
        AttributionMap::from_dense(rows, "test".into(), 0)
    }

    fn n(layer: usize, index: usize) -> NeuronRef {
        NeuronRef { layer, index }
    }

    #[test]
    fn coarse_select_is_strict_and_skips_negatives() {
        let map = map_from(array![[0.2, 0.05], [0.3, -0.1]]);
        let set = coarse_select(&map, 0.1).unwrap();
        assert_eq!(set.refs().copied().collect::<Vec<_>>(), vec![n(0, 0), n(1, 0)]);
        // Boundary is strict: a score equal to t is not kept.
        let set = coarse_select(&map, 0.2).unwrap();
        assert_eq!(set.refs().copied().collect::<Vec<_>>(), vec![n(1, 0)]);
    }

    #[test]
    fn coarse_select_t0_keeps_strictly_positive_only() {
        let map = map_from(array![[0.0, 0.7], [-0.2, 0.0]]);
        let set = coarse_select(&map, 0.0).unwrap();
        assert_eq!(set.refs().copied().collect::<Vec<_>>(), vec![n(0, 1)]);
    }

    #[test]
    fn coarse_select_above_max_is_empty() {
        let map = map_from(array![[0.2, 0.05]]);
        assert!(coarse_select(&map, 0.5).unwrap().is_empty());
    }

    #[test]
    fn coarse_select_rejects_negative_t() {
        let map = map_from(array![[0.2]]);
        assert!(coarse_select(&map, -0.1).is_err());
    }

    #[test]
    fn adaptive_select_is_inclusive() {
        let map = map_from(array![[0.4, 0.1], [0.25, 0.2]]);
        let set = adaptive_select(&map, 0.5).unwrap();
        assert_eq!(
            set.refs().copied().collect::<Vec<_>>(),
            vec![n(0, 0), n(1, 0), n(1, 1)]
        );
    }

    #[test]
    fn adaptive_select_fraction_one_keeps_argmax() {
        let map = map_from(array![[0.4, 0.1], [0.25, 0.2]]);
        let set = adaptive_select(&map, 1.0).unwrap();
        assert_eq!(set.refs().copied().collect::<Vec<_>>(), vec![n(0, 0)]);
    }

    #[test]
    fn adaptive_select_errors_on_nonpositive_max() {
        let map = map_from(array![[0.0, -0.4]]);
        assert!(matches!(
            adaptive_select(&map, 0.5),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn refine_counts_supporting_prompts() {
        let a = NeuronSet::from_refs([n(0, 1), n(0, 2)]);
        let b = NeuronSet::from_refs([n(0, 1)]);
        let c = NeuronSet::from_refs([n(0, 1), n(1, 3)]);
        let refined = refine(&[a, b, c], 50.0).unwrap();
        assert_eq!(refined.refs().copied().collect::<Vec<_>>(), vec![n(0, 1)]);
        assert_eq!(refined.support(&n(0, 1)), 3);
    }

    #[test]
    fn refine_p100_is_intersection_and_single_set_identity() {
        let a = NeuronSet::from_refs([n(0, 1), n(0, 2)]);
        let b = NeuronSet::from_refs([n(0, 2), n(1, 0)]);
        let refined = refine(&[a.clone(), b], 100.0).unwrap();
        assert_eq!(refined.refs().copied().collect::<Vec<_>>(), vec![n(0, 2)]);

        for p in [0.0, 33.3, 100.0] {
            let single = refine(std::slice::from_ref(&a), p).unwrap();
            assert_eq!(
                single.refs().copied().collect::<Vec<_>>(),
                a.refs().copied().collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn refine_rejects_empty_input() {
        assert!(refine(&[], 50.0).is_err());
    }

    #[test]
    fn refinement_policy_validates_and_dispatches() {
        let map = map_from(array![[0.4, 0.1], [0.25, 0.2]]);
        let coarse = RefinementPolicy {
            mode: ThresholdMode::AbsoluteT { t: 0.15 },
            support_percent: 50.0,
        };
        coarse.validate().unwrap();
        assert_eq!(
            coarse.select(&map).unwrap().refs().copied().collect::<Vec<_>>(),
            vec![n(0, 0), n(1, 0), n(1, 1)]
        );

        let adaptive = RefinementPolicy {
            mode: ThresholdMode::AdaptiveFraction { fraction: 1.0 },
            support_percent: 100.0,
        };
        assert_eq!(adaptive.select(&map).unwrap().len(), 1);

        for bad in [
            RefinementPolicy {
                mode: ThresholdMode::AbsoluteT { t: -1.0 },
                support_percent: 50.0,
            },
            RefinementPolicy {
                mode: ThresholdMode::AdaptiveFraction { fraction: 1.5 },
                support_percent: 50.0,
            },
            RefinementPolicy {
                mode: ThresholdMode::AbsoluteT { t: 0.1 },
                support_percent: 120.0,
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn set_algebra_helpers() {
        let a = NeuronSet::from_refs([n(0, 0), n(0, 1)]);
        let b = NeuronSet::from_refs([n(0, 1), n(2, 0)]);
        assert_eq!(
            a.intersection(&b).refs().copied().collect::<Vec<_>>(),
            vec![n(0, 1)]
        );
        assert_eq!(a.union(&b).len(), 3);
        assert_eq!(
            a.symmetric_difference(&b).refs().copied().collect::<Vec<_>>(),
            vec![n(0, 0), n(2, 0)]
        );
        assert_eq!(a.first(), Some(n(0, 0)));
    }
}
