//! Split-conformal calibration of a single global threshold.
//!
//! Calibration scores every held-out example with its true label, then takes
//! the `ceil((n + 1)(1 - alpha))`-th smallest score as the threshold `q`.
//! At test time the reported set holds every class whose score would be at
//! most `q`, which gives `1 - alpha <= P(y in set) <= 1 - alpha + 1/(n + 1)`
//! for exchangeable data and continuous scores.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::example::{check_split, LabeledExample};
use crate::score::{RapsParams, ScoreFamily};
use crate::seed::{uniform_for, SEED_SCHEME};
use crate::set::{mass_reaching, score_at_most, PredictionSet, SetPolicy, SetRule};
use crate::simplex::{ProbabilityVector, RankedProbabilities};

/// Version tag written into serialized thresholds.
pub const THRESHOLD_FORMAT_VERSION: u32 = 1;

/// Stage names used for per-example uniform draws.
pub const CALIBRATION_STAGE: &str = "calibrate";
pub const PREDICTION_STAGE: &str = "predict";

/// Prediction-set method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Aps,
    #[serde(rename = "aps_rand")]
    ApsRandomized,
    Raps,
    #[serde(rename = "raps_rand")]
    RapsRandomized,
    Cpsn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Aps,
        Method::ApsRandomized,
        Method::Raps,
        Method::RapsRandomized,
        Method::Cpsn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Aps => "aps",
            Method::ApsRandomized => "aps_rand",
            Method::Raps => "raps",
            Method::RapsRandomized => "raps_rand",
            Method::Cpsn => "cpsn",
        }
    }

    /// Row label used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Naive => "Naive",
            Method::Aps => "APS",
            Method::ApsRandomized => "Rand APS",
            Method::Raps => "RAPS",
            Method::RapsRandomized => "Rand RAPS",
            Method::Cpsn => "CPSN",
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, Method::ApsRandomized | Method::RapsRandomized)
    }

    pub fn uses_raps(&self) -> bool {
        matches!(self, Method::Raps | Method::RapsRandomized)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::invalid("method", format!("unknown method {s:?}")))
    }
}

/// Index (1-based) of the order statistic used as the conformal quantile.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    // The tolerance keeps exact products such as 100 * 0.9 from rounding up.
    let level = (n as f64 + 1.0) * (1.0 - alpha);
    ((level - 1e-9).ceil() as usize).max(1)
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or `+inf` when that
/// rank exceeds `n` (the calibration set is too small for the level).
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    let alpha = check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("conformal scores"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", format!("score {i} is not finite")));
    }
    let rank = quantile_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*kth)
}

fn family_for(method: Method, raps: Option<RapsParams>) -> Result<ScoreFamily> {
    match method {
        Method::Aps | Method::ApsRandomized => Ok(ScoreFamily::Aps),
        Method::Raps | Method::RapsRandomized => raps
            .map(ScoreFamily::Raps)
            .ok_or_else(|| Error::invalid("raps", "RAPS methods need (a, b) parameters")),
        Method::Naive | Method::Cpsn => Err(Error::invalid(
            "method",
            format!("{method} is not a single-threshold score method"),
        )),
    }
}

/// Per-example conformal scores of a labeled calibration split.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalScoreSet {
    pub scores: Vec<f64>,
    pub method: Method,
    pub raps: Option<RapsParams>,
}

impl ConformalScoreSet {
    /// Scores each example with its true label. Randomized methods draw the
    /// uniform for example `t` from `(seed, "calibrate", t)`.
    pub fn compute(
        examples: &[LabeledExample],
        method: Method,
        raps: Option<RapsParams>,
        seed: u64,
    ) -> Result<Self> {
        let (k, _) = check_split(examples, "calibration split")?;
        let family = family_for(method, raps)?;
        if let Some(p) = raps {
            p.validate_for(k)?;
        }
        let scores = examples
            .iter()
            .enumerate()
            .map(|(t, ex)| {
                let ranked = ex.probs.rank();
                let r = ranked.position(ex.label)?;
                Ok(if method.is_randomized() {
                    let u = uniform_for(seed, CALIBRATION_STAGE, t as u64);
                    family.rank_score_randomized(&ranked, r, u)
                } else {
                    family.rank_score(&ranked, r)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores,
            method,
            raps,
        })
    }
}

/// A fitted single-threshold conformal predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub version: u32,
    pub method: Method,
    pub alpha: f64,
    /// Threshold, capped at the largest attainable score (full sets).
    pub q: f64,
    pub n_cal: usize,
    pub k: usize,
    pub raps: Option<RapsParams>,
    pub randomized: bool,
    pub seed: u64,
    pub seed_scheme: String,
    pub set_policy: SetPolicy,
    /// Softmax temperature the calibration probabilities were computed at.
    pub temperature: Option<f64>,
}

/// Fits a global threshold on `examples` with the default set policy.
pub fn calibrate(
    examples: &[LabeledExample],
    alpha: f64,
    method: Method,
    raps: Option<RapsParams>,
    seed: u64,
) -> Result<CalibratedThreshold> {
    calibrate_with_policy(examples, alpha, method, raps, seed, SetPolicy::default())
}

pub fn calibrate_with_policy(
    examples: &[LabeledExample],
    alpha: f64,
    method: Method,
    raps: Option<RapsParams>,
    seed: u64,
    set_policy: SetPolicy,
) -> Result<CalibratedThreshold> {
    let alpha = check_alpha(alpha)?;
    let (k, _) = check_split(examples, "calibration split")?;
    let family = family_for(method, raps)?;
    let scores = ConformalScoreSet::compute(examples, method, raps, seed)?;
    let q = conformal_quantile(&scores.scores, alpha)?.min(family.max_score(k));
    Ok(CalibratedThreshold {
        version: THRESHOLD_FORMAT_VERSION,
        method,
        alpha,
        q,
        n_cal: examples.len(),
        k,
        raps,
        randomized: method.is_randomized(),
        seed,
        seed_scheme: SEED_SCHEME.to_string(),
        set_policy,
        temperature: None,
    })
}

/// Uncalibrated baseline: take classes until their mass reaches `1 - alpha`.
pub fn naive_threshold(alpha: f64) -> Result<CalibratedThreshold> {
    let alpha = check_alpha(alpha)?;
    Ok(CalibratedThreshold {
        version: THRESHOLD_FORMAT_VERSION,
        method: Method::Naive,
        alpha,
        q: 1.0 - alpha,
        n_cal: 0,
        k: 0,
        raps: None,
        randomized: false,
        seed: 0,
        seed_scheme: SEED_SCHEME.to_string(),
        set_policy: SetPolicy::mass_reaching(),
        temperature: None,
    })
}

impl CalibratedThreshold {
    /// Prediction set for `p`. `ordinal` keys the test-time uniform draw of
    /// randomized methods (`(seed, "predict", ordinal)`).
    pub fn predict_set(&self, p: &ProbabilityVector, ordinal: u64) -> Result<PredictionSet> {
        if self.method != Method::Naive && p.k() != self.k {
            return Err(Error::Shape {
                context: "class count of threshold vs probabilities",
                expected: self.k,
                found: p.k(),
            });
        }
        Ok(self.predict_ranked(&p.rank(), ordinal))
    }

    pub(crate) fn predict_ranked(
        &self,
        ranked: &RankedProbabilities,
        ordinal: u64,
    ) -> PredictionSet {
        if self.method == Method::Naive {
            return mass_reaching(ranked, self.q);
        }
        let family = match self.raps {
            Some(p) if self.method.uses_raps() => ScoreFamily::Raps(p),
            _ => ScoreFamily::Aps,
        };
        let nonempty = self.set_policy.nonempty;
        if self.randomized {
            let u = uniform_for(self.seed, PREDICTION_STAGE, ordinal);
            return score_at_most(ranked, family, self.q, Some(u), nonempty);
        }
        match self.set_policy.rule {
            SetRule::ScoreAtMost => score_at_most(ranked, family, self.q, None, nonempty),
            SetRule::MassReaching => penalized_reaching(ranked, family, self.q),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.version != THRESHOLD_FORMAT_VERSION {
            return Err(Error::invalid(
                "version",
                format!("threshold format {} is not supported", t.version),
            ));
        }
        check_alpha(t.alpha)?;
        if !t.q.is_finite() {
            return Err(Error::invalid("q", "threshold must be finite"));
        }
        Ok(t)
    }
}

/// Shortest prefix whose penalized cumulative score reaches `v`; plain mass
/// for APS. Always at least one class.
fn penalized_reaching(ranked: &RankedProbabilities, family: ScoreFamily, v: f64) -> PredictionSet {
    match family {
        ScoreFamily::Aps => mass_reaching(ranked, v),
        ScoreFamily::Raps(params) => {
            let k = ranked.k();
            let len = (0..k)
                .position(|r| {
                    ranked.cumsum[r] + params.a * (r + 1).saturating_sub(params.b) as f64 >= v
                })
                .map_or(k, |r| r + 1);
            PredictionSet {
                classes: ranked.order[..len.max(1)].to_vec(),
                threshold_used: v,
            }
        }
    }
}

/// Candidate RAPS parameters for [`tune_raps`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapsGrid {
    pub a: Vec<f64>,
    pub b: Vec<usize>,
}

impl RapsGrid {
    /// `a` in {0.001, 0.01, 0.05, 0.1, 0.5}, `b` in `1..=min(k, 10)`.
    pub fn default_for(k: usize) -> Self {
        Self {
            a: vec![0.001, 0.01, 0.05, 0.1, 0.5],
            b: (1..=k.min(10)).collect(),
        }
    }
}

/// Smallest split [`tune_raps`] accepts.
pub const MIN_TUNING_EXAMPLES: usize = 20;

/// Grid search for RAPS `(a, b)`: calibrate deterministic RAPS on the first
/// half of `examples`, measure mean set size on the second half, keep the
/// smallest. Ties go to the smaller `a`, then the smaller `b`.
pub fn tune_raps(
    examples: &[LabeledExample],
    alpha: f64,
    grid: &RapsGrid,
    set_policy: SetPolicy,
) -> Result<RapsParams> {
    let alpha = check_alpha(alpha)?;
    if examples.len() < MIN_TUNING_EXAMPLES {
        return Err(Error::invalid(
            "tuning split",
            format!(
                "{} examples, need at least {MIN_TUNING_EXAMPLES}",
                examples.len()
            ),
        ));
    }
    let (k, _) = check_split(examples, "tuning split")?;
    let mut a_values = grid.a.clone();
    a_values.sort_by(f64::total_cmp);
    a_values.dedup();
    let mut b_values: Vec<usize> = grid
        .b
        .iter()
        .copied()
        .filter(|&b| b >= 1 && b <= k)
        .collect();
    b_values.sort_unstable();
    b_values.dedup();
    if a_values.is_empty() || b_values.is_empty() {
        return Err(Error::Empty("RAPS grid"));
    }

    let half = examples.len() / 2;
    let ranked: Vec<RankedProbabilities> = examples.iter().map(|e| e.probs.rank()).collect();
    let positions: Vec<usize> = examples
        .iter()
        .zip(&ranked)
        .map(|(e, r)| r.position(e.label))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, RapsParams)> = None;
    for &a in &a_values {
        for &b in &b_values {
            let params = RapsParams::new(a, b)?;
            let family = ScoreFamily::Raps(params);
            let scores: Vec<f64> = (0..half)
                .map(|t| family.rank_score(&ranked[t], positions[t]))
                .collect();
            let q = conformal_quantile(&scores, alpha)?.min(family.max_score(k));
            let threshold = CalibratedThreshold {
                version: THRESHOLD_FORMAT_VERSION,
                method: Method::Raps,
                alpha,
                q,
                n_cal: half,
                k,
                raps: Some(params),
                randomized: false,
                seed: 0,
                seed_scheme: SEED_SCHEME.to_string(),
                set_policy,
                temperature: None,
            };
            let total: usize = ranked[half..]
                .iter()
                .map(|r| threshold.predict_ranked(r, 0).len())
                .sum();
            let size = total as f64 / (examples.len() - half) as f64;
            if best.map_or(true, |(s, _)| size < s) {
                best = Some((size, params));
            }
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::set::build_prediction_set;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn ex(p: &[f64], y: usize) -> LabeledExample {
        LabeledExample::new(vec![0.0], pv(p), y).unwrap()
    }

    /// Reference quantile: full sort, then index.
    fn sorted_quantile(scores: &[f64], alpha: f64) -> f64 {
        let n = scores.len();
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let level = (n as f64 + 1.0) * (1.0 - alpha);
        let mut rank = level.floor() as usize;
        if (rank as f64) < level - 1e-9 {
            rank += 1;
        }
        let rank = rank.max(1);
        if rank > n {
            f64::INFINITY
        } else {
            s[rank - 1]
        }
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_quantile(&scores, 0.5).unwrap(), 0.6);
        assert_eq!(conformal_quantile(&scores, 0.05).unwrap(), f64::INFINITY);
        assert_eq!(quantile_rank(99, 0.1), 90);
        let scores: Vec<f64> = (0..99).map(|i| ((i * 37) % 99) as f64).collect();
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 89.0);
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[0.1], 0.0).is_err());
        assert!(conformal_quantile(&[0.1], 1.0).is_err());
        assert!(conformal_quantile(&[f64::NAN], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn quantile_matches_sorting(scores in prop::collection::vec(-5.0f64..5.0, 1..300), alpha in 0.001f64..0.999) {
            prop_assert_eq!(conformal_quantile(&scores, alpha).unwrap(), sorted_quantile(&scores, alpha));
        }

        #[test]
        fn calibration_split_is_covered(
            scores in prop::collection::vec(0.0f64..1.0, 1..200),
            alpha in 0.01f64..0.99,
        ) {
            let q = conformal_quantile(&scores, alpha).unwrap();
            let covered = scores.iter().filter(|&&s| s <= q).count() as f64 / scores.len() as f64;
            prop_assert!(covered >= 1.0 - alpha);
        }
    }

    #[test]
    fn single_example_gives_full_sets() {
        let t = calibrate(&[ex(&[0.6, 0.3, 0.1], 1)], 0.2, Method::Aps, None, 0).unwrap();
        assert_eq!(t.q, 1.0);
        assert_eq!(t.predict_set(&pv(&[0.7, 0.2, 0.1]), 0).unwrap().len(), 3);
    }

    #[test]
    fn identical_scores_give_that_score() {
        let exs: Vec<_> = (0..50).map(|_| ex(&[0.6, 0.3, 0.1], 1)).collect();
        let t = calibrate(&exs, 0.1, Method::Aps, None, 0).unwrap();
        assert!((t.q - 0.9).abs() < 1e-12);
    }

    #[test]
    fn aps_prediction_example() {
        let mut t = calibrate(&[ex(&[0.6, 0.4], 0)], 0.4, Method::Aps, None, 0).unwrap();
        t.q = 0.5;
        assert!(t
            .predict_set(&pv(&[0.5, 0.3, 0.2]), 0)
            .unwrap_err()
            .to_string()
            .contains("class count"));
        t.k = 3;
        assert_eq!(
            t.predict_set(&pv(&[0.5, 0.3, 0.2]), 0).unwrap().classes,
            vec![0]
        );
    }

    #[test]
    fn mismatched_k_is_a_shape_error() {
        let err = calibrate(
            &[ex(&[0.6, 0.4], 0), ex(&[0.5, 0.3, 0.2], 0)],
            0.1,
            Method::Aps,
            None,
            0,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert!(calibrate(&[], 0.1, Method::Aps, None, 0).is_err());
        assert!(calibrate(&[ex(&[0.6, 0.4], 0)], 0.1, Method::Raps, None, 0).is_err());
        assert!(calibrate(&[ex(&[0.6, 0.4], 0)], 1.5, Method::Aps, None, 0).is_err());
    }

    #[test]
    fn randomized_boundary_frequency() {
        let mut t = calibrate(
            &[ex(&[0.5, 0.3, 0.2], 0)],
            0.4,
            Method::ApsRandomized,
            None,
            11,
        )
        .unwrap();
        t.q = 0.65;
        let p = pv(&[0.5, 0.3, 0.2]);
        let n = 10_000;
        let hits = (0..n)
            .filter(|&i| t.predict_set(&p, i).unwrap().contains(1))
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn naive_examples() {
        assert!((naive_threshold(0.1).unwrap().q - 0.9).abs() < 1e-15);
        assert!((naive_threshold(0.05).unwrap().q - 0.95).abs() < 1e-15);
        let t = naive_threshold(0.1).unwrap();
        let p = pv(&[0.95, 0.05]);
        assert_eq!(t.predict_set(&p, 0).unwrap(), build_prediction_set(&p, 0.9));
        assert_eq!(t.predict_set(&p, 0).unwrap().classes, vec![0]);
        assert!(naive_threshold(0.0).is_err());
    }

    #[test]
    fn mass_reaching_policy_for_raps() {
        let mut t = calibrate(
            &[ex(&[0.6, 0.4], 0)],
            0.4,
            Method::Raps,
            Some(RapsParams::new(0.1, 1).unwrap()),
            0,
        )
        .unwrap();
        t.k = 3;
        t.set_policy = SetPolicy::mass_reaching();
        let p = pv(&[0.5, 0.3, 0.2]);
        t.q = 0.85;
        assert_eq!(t.predict_set(&p, 0).unwrap().classes, vec![0, 1]);
        t.q = 0.5;
        assert_eq!(t.predict_set(&p, 0).unwrap().classes, vec![0]);
        t.set_policy = SetPolicy::default();
        t.q = 0.85;
        assert_eq!(t.predict_set(&p, 0).unwrap().classes, vec![0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let exs: Vec<_> = (0..30)
            .map(|i| ex(&[0.5 + i as f64 / 100.0, 0.5 - i as f64 / 100.0], i % 2))
            .collect();
        let t = calibrate(
            &exs,
            0.1,
            Method::RapsRandomized,
            Some(RapsParams::new(0.01, 1).unwrap()),
            u64::MAX - 3,
        )
        .unwrap();
        let back = CalibratedThreshold::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.q.to_bits(), t.q.to_bits());
    }

    fn peaked(n: usize, seed: u64) -> Vec<LabeledExample> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let top = rng.gen_range(0.55..0.98);
                let second = rng.gen_range(0.0..1.0 - top);
                let probs = vec![top, second, 1.0 - top - second];
                let u: f64 = rng.gen();
                let y = if u < probs[0] {
                    0
                } else if u < probs[0] + probs[1] {
                    1
                } else {
                    2
                };
                ex(&probs, y)
            })
            .collect()
    }

    #[test]
    fn tuning_never_loses_to_its_own_grid() {
        let exs = peaked(400, 3);
        let grid = RapsGrid {
            a: vec![0.0, 0.01, 0.1, 0.5],
            b: vec![1, 2, 3],
        };
        let best = tune_raps(&exs, 0.1, &grid, SetPolicy::default()).unwrap();
        // Exhaustive re-evaluation of the grid as the oracle.
        let half = exs.len() / 2;
        let size_of = |params: RapsParams| {
            let t = calibrate(&exs[..half], 0.1, Method::Raps, Some(params), 0).unwrap();
            exs[half..]
                .iter()
                .map(|e| t.predict_set(&e.probs, 0).unwrap().len())
                .sum::<usize>() as f64
                / (exs.len() - half) as f64
        };
        let best_size = size_of(best);
        for &a in &grid.a {
            for &b in &grid.b {
                assert!(best_size <= size_of(RapsParams::new(a, b).unwrap()));
            }
        }
        let aps_size = size_of(RapsParams::new(0.0, 1).unwrap());
        assert!(best_size <= aps_size);
    }

    #[test]
    fn tuning_single_pair_and_errors() {
        let exs = peaked(40, 4);
        let grid = RapsGrid {
            a: vec![0.05],
            b: vec![2],
        };
        assert_eq!(
            tune_raps(&exs, 0.1, &grid, SetPolicy::default()).unwrap(),
            RapsParams::new(0.05, 2).unwrap()
        );
        assert!(tune_raps(&exs[..19], 0.1, &grid, SetPolicy::default()).is_err());
        let empty = RapsGrid {
            a: vec![0.05],
            b: vec![7],
        };
        assert!(tune_raps(&exs, 0.1, &empty, SetPolicy::default()).is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("aps-rand".parse::<Method>().unwrap(), Method::ApsRandomized);
        assert!("lac".parse::<Method>().is_err());
    }
}
