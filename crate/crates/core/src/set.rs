//! Turning a threshold into a prediction set.
//!
//! Two constructions exist. [`build_prediction_set`] takes top-ranked classes
//! until their mass reaches the threshold (the boundary class is always
//! included). [`threshold_set`] keeps exactly the classes whose own score is
//! at most the threshold, which is the inverse of the score used during
//! calibration: `y` is in the set iff `score(x, y) <= threshold`.

use serde::{Deserialize, Serialize};

use crate::score::ScoreFamily;
use crate::simplex::{ProbabilityVector, RankedProbabilities};

/// A set of candidate classes, always a prefix of the probability ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Class indices in ranking order (most likely first).
    pub classes: Vec<usize>,
    /// Threshold the set was built from, after clamping.
    pub threshold_used: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    fn from_prefix(ranked: &RankedProbabilities, len: usize, threshold_used: f64) -> Self {
        Self {
            classes: ranked.order[..len].to_vec(),
            threshold_used,
        }
    }
}

/// How a deterministic threshold maps onto a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRule {
    /// Keep classes whose score is at most the threshold.
    #[default]
    ScoreAtMost,
    /// Shortest ranking prefix whose mass reaches the threshold.
    MassReaching,
}

/// Set construction settings carried by every calibrated artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetPolicy {
    pub rule: SetRule,
    /// Force the top-ranked class into otherwise empty sets.
    pub nonempty: bool,
}

impl Default for SetPolicy {
    fn default() -> Self {
        Self {
            rule: SetRule::ScoreAtMost,
            nonempty: false,
        }
    }
}

impl SetPolicy {
    /// Mass-reaching sets with at least one class.
    pub fn mass_reaching() -> Self {
        Self {
            rule: SetRule::MassReaching,
            nonempty: true,
        }
    }
}

/// Shortest prefix of the ranking whose cumulative mass is at least `v`.
///
/// `v` is clamped to `[0, 1]` and the set always holds at least the top class.
pub fn build_prediction_set(p: &ProbabilityVector, v: f64) -> PredictionSet {
    mass_reaching(&p.rank(), v)
}

pub(crate) fn mass_reaching(ranked: &RankedProbabilities, v: f64) -> PredictionSet {
    let v = clamp_unit(v);
    let k = ranked.k();
    let len = if v >= 1.0 {
        k
    } else {
        ranked
            .cumsum
            .iter()
            .position(|&c| c >= v)
            .map_or(k, |r| r + 1)
    };
    PredictionSet::from_prefix(ranked, len.max(1), v)
}

/// Classes whose deterministic `family` score is at most `v`.
///
/// A threshold at or above the family's largest attainable score yields the
/// full set. With `nonempty`, an empty result is replaced by the top class.
pub fn threshold_set(
    p: &ProbabilityVector,
    family: ScoreFamily,
    v: f64,
    nonempty: bool,
) -> PredictionSet {
    score_at_most(&p.rank(), family, v, None, nonempty)
}

/// Randomized counterpart of [`threshold_set`]: rank `r` is kept iff its
/// randomized score with draw `u` is at most `v`. Ranks before the boundary
/// class are kept regardless of `u`; the boundary class is kept iff
/// `u * own_term <= v - strict_mass`.
pub fn randomized_threshold_set(
    p: &ProbabilityVector,
    family: ScoreFamily,
    v: f64,
    u: f64,
    nonempty: bool,
) -> PredictionSet {
    score_at_most(&p.rank(), family, v, Some(u), nonempty)
}

pub(crate) fn score_at_most(
    ranked: &RankedProbabilities,
    family: ScoreFamily,
    v: f64,
    u: Option<f64>,
    nonempty: bool,
) -> PredictionSet {
    let k = ranked.k();
    let max = family.max_score(k);
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, max) };
    let len = if v >= max {
        k
    } else {
        // Scores are nondecreasing along the ranking, so the kept ranks form a prefix.
        (0..k)
            .take_while(|&r| {
                let s = match u {
                    None => family.rank_score(ranked, r),
                    Some(u) => family.rank_score_randomized(ranked, r, u),
                };
                s <= v
            })
            .count()
    };
    let len = if nonempty { len.max(1) } else { len };
    PredictionSet::from_prefix(ranked, len, v)
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{aps_score, aps_score_randomized, RapsParams};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mass_reaching_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert_eq!(build_prediction_set(&p, 0.7).classes, vec![0, 1]);
        assert_eq!(build_prediction_set(&p, 0.5).classes, vec![0]);
        let clamped = build_prediction_set(&p, -0.2);
        assert_eq!(clamped.classes, vec![0]);
        assert_eq!(clamped.threshold_used, 0.0);
        assert_eq!(build_prediction_set(&p, 1.0).classes, vec![0, 1, 2]);
        assert_eq!(build_prediction_set(&p, 7.0).classes, vec![0, 1, 2]);
        assert_eq!(
            build_prediction_set(&pv(&[0.2, 0.5, 0.3]), 0.6).classes,
            vec![1, 2]
        );
    }

    #[test]
    fn score_at_most_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let aps = ScoreFamily::Aps;
        assert_eq!(threshold_set(&p, aps, 0.7, false).classes, vec![0]);
        assert_eq!(threshold_set(&p, aps, 0.8, false).classes, vec![0, 1]);
        assert!(threshold_set(&p, aps, 0.4, false).is_empty());
        assert_eq!(threshold_set(&p, aps, 0.4, true).classes, vec![0]);
        assert_eq!(threshold_set(&p, aps, f64::INFINITY, false).len(), 3);
        let raps = ScoreFamily::Raps(RapsParams::new(0.1, 1).unwrap());
        assert_eq!(threshold_set(&p, raps, 0.89, false).classes, vec![0]);
        assert_eq!(threshold_set(&p, raps, 0.9, false).classes, vec![0, 1]);
        assert_eq!(threshold_set(&p, raps, 1.2, false).len(), 3);
    }

    #[test]
    fn tied_classes_enter_together() {
        let p = pv(&[0.2, 0.4, 0.4]);
        assert!(threshold_set(&p, ScoreFamily::Aps, 0.5, false).is_empty());
        assert_eq!(
            threshold_set(&p, ScoreFamily::Aps, 0.8, false).classes,
            vec![1, 2]
        );
    }

    #[test]
    fn randomized_boundary_rule() {
        let p = pv(&[0.5, 0.3, 0.2]);
        // q = 0.65: class 1 enters iff 0.5 + 0.3u <= 0.65, i.e. u <= 0.5
        let with = randomized_threshold_set(&p, ScoreFamily::Aps, 0.65, 0.49, false);
        let without = randomized_threshold_set(&p, ScoreFamily::Aps, 0.65, 0.51, false);
        assert_eq!(with.classes, vec![0, 1]);
        assert_eq!(without.classes, vec![0]);
    }

    fn simplex_and_label() -> impl Strategy<Value = (ProbabilityVector, usize)> {
        (2usize..8).prop_flat_map(|k| {
            (
                prop::collection::vec(0.001f64..1.0, k).prop_map(|w| {
                    let s: f64 = w.iter().sum();
                    pv(&w.iter().map(|x| x / s).collect::<Vec<_>>())
                }),
                0..k,
            )
        })
    }

    proptest! {
        #[test]
        fn mass_reaching_is_monotone((p, _y) in simplex_and_label(), a in -0.2f64..1.2, b in -0.2f64..1.2) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = build_prediction_set(&p, lo);
            let large = build_prediction_set(&p, hi);
            prop_assert!(small.classes.iter().all(|c| large.contains(*c)));
        }

        #[test]
        fn score_set_inverts_the_score((p, y) in simplex_and_label(), v in 0.0f64..1.0, u in 0.0f64..1.0) {
            let s = aps_score(&p, y).unwrap();
            prop_assert_eq!(threshold_set(&p, ScoreFamily::Aps, v, false).contains(y), s <= v);
            let sr = aps_score_randomized(&p, y, u).unwrap();
            prop_assert_eq!(randomized_threshold_set(&p, ScoreFamily::Aps, v, u, false).contains(y), sr <= v);
        }

        #[test]
        fn mass_reaching_contains_label_iff_mass_before_is_short((p, y) in simplex_and_label(), v in 0.0001f64..1.0) {
            // The boundary class is included, so y enters as soon as v exceeds the mass ranked ahead of it.
            let ranked = p.rank();
            let r = ranked.position(y).unwrap();
            let inside = build_prediction_set(&p, v).contains(y);
            prop_assert_eq!(inside, r == 0 || ranked.mass_before(r) < v);
        }
    }
}
