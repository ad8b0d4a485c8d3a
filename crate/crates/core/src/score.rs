//! Conformal scores for classification: APS, randomized APS, RAPS and
//! randomized RAPS.
//!
//! Every score is expressed per rank of a [`RankedProbabilities`] so that the
//! calibration path (score of the true label) and the prediction path (which
//! ranks fall under a threshold) evaluate the same floating-point expression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{ProbabilityVector, RankedProbabilities};

/// RAPS regularization: every rank past `b` (1-based) pays an extra `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsParams {
    pub a: f64,
    pub b: usize,
}

impl RapsParams {
    pub fn new(a: f64, b: usize) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::invalid(
                "raps.a",
                format!("{a} must be finite and >= 0"),
            ));
        }
        if b == 0 {
            return Err(Error::invalid("raps.b", "rank cutoff must be >= 1"));
        }
        Ok(Self { a, b })
    }

    /// Checks `b <= k` for a problem with `k` classes.
    pub fn validate_for(&self, k: usize) -> Result<()> {
        Self::new(self.a, self.b)?;
        if self.b > k {
            return Err(Error::invalid(
                "raps.b",
                format!("cutoff {} exceeds the {k} classes", self.b),
            ));
        }
        Ok(())
    }

    /// Penalty accumulated by ranks `1..=n` (1-based).
    fn penalty_through(&self, n: usize) -> f64 {
        self.a * n.saturating_sub(self.b) as f64
    }
}

/// Which score a threshold is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFamily {
    Aps,
    Raps(RapsParams),
}

impl ScoreFamily {
    /// Deterministic score of the class at rank `r`: the mass (plus penalty)
    /// of every rank up to the end of `r`'s tie group.
    pub fn rank_score(&self, ranked: &RankedProbabilities, r: usize) -> f64 {
        let end = ranked.tie_end(r);
        match self {
            ScoreFamily::Aps => ranked.cumsum[end],
            ScoreFamily::Raps(params) => ranked.cumsum[end] + params.penalty_through(end + 1),
        }
    }

    /// Randomized score of the class at rank `r` with uniform draw `u`.
    ///
    /// APS counts the mass of classes strictly more probable than rank `r`;
    /// RAPS counts every strictly higher rank, penalty included.
    pub fn rank_score_randomized(&self, ranked: &RankedProbabilities, r: usize, u: f64) -> f64 {
        match self {
            ScoreFamily::Aps => ranked.mass_before(ranked.tie_start(r)) + u * ranked.sorted[r],
            ScoreFamily::Raps(params) => {
                let own = ranked.sorted[r] + if r + 1 > params.b { params.a } else { 0.0 };
                ranked.mass_before(r) + params.penalty_through(r) + u * own
            }
        }
    }

    /// Largest score any class can reach with `k` classes.
    pub fn max_score(&self, k: usize) -> f64 {
        match self {
            ScoreFamily::Aps => 1.0,
            ScoreFamily::Raps(params) => 1.0 + params.penalty_through(k),
        }
    }

    pub fn raps_params(&self) -> Option<RapsParams> {
        match self {
            ScoreFamily::Aps => None,
            ScoreFamily::Raps(p) => Some(*p),
        }
    }
}

fn check_u(u: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&u) {
        Ok(u)
    } else {
        Err(Error::invalid("u", format!("{u} is not in [0, 1]")))
    }
}

/// APS score: total mass of the classes at least as likely as `y`.
pub fn aps_score(p: &ProbabilityVector, y: usize) -> Result<f64> {
    let ranked = p.rank();
    let r = ranked.position(y)?;
    Ok(ScoreFamily::Aps.rank_score(&ranked, r))
}

/// Randomized APS score: `u * p_y` plus the mass of strictly more likely classes.
pub fn aps_score_randomized(p: &ProbabilityVector, y: usize, u: f64) -> Result<f64> {
    let u = check_u(u)?;
    let ranked = p.rank();
    let r = ranked.position(y)?;
    Ok(ScoreFamily::Aps.rank_score_randomized(&ranked, r, u))
}

/// RAPS score: APS with an extra `a` for every included rank beyond `b`.
pub fn raps_score(p: &ProbabilityVector, y: usize, params: RapsParams) -> Result<f64> {
    params.validate_for(p.k())?;
    let ranked = p.rank();
    let r = ranked.position(y)?;
    Ok(ScoreFamily::Raps(params).rank_score(&ranked, r))
}

/// Randomized RAPS score: the true label's own term (probability plus any
/// penalty) is scaled by `u`.
pub fn raps_score_randomized(
    p: &ProbabilityVector,
    y: usize,
    params: RapsParams,
    u: f64,
) -> Result<f64> {
    params.validate_for(p.k())?;
    let u = check_u(u)?;
    let ranked = p.rank();
    let r = ranked.position(y)?;
    Ok(ScoreFamily::Raps(params).rank_score_randomized(&ranked, r, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn aps_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!(close(aps_score(&p, 0).unwrap(), 0.5));
        assert!(close(aps_score(&p, 1).unwrap(), 0.8));
        assert!(close(aps_score(&p, 2).unwrap(), 1.0));
        assert!(close(aps_score(&pv(&[0.4, 0.4, 0.2]), 0).unwrap(), 0.8));
        assert!(matches!(
            aps_score(&p, 3),
            Err(Error::ClassOutOfRange { class: 3, k: 3 })
        ));
    }

    #[test]
    fn randomized_aps_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        assert!(close(aps_score_randomized(&p, 1, 1.0).unwrap(), 0.8));
        assert!(close(aps_score_randomized(&p, 1, 0.0).unwrap(), 0.5));
        assert!(close(aps_score_randomized(&p, 0, 0.5).unwrap(), 0.25));
        assert!(aps_score_randomized(&p, 0, 1.5).is_err());
        assert!(aps_score_randomized(&p, 0, -0.1).is_err());
    }

    #[test]
    fn raps_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let params = RapsParams::new(0.1, 1).unwrap();
        assert!(close(raps_score(&p, 1, params).unwrap(), 0.9));
        assert!(close(raps_score(&p, 2, params).unwrap(), 1.2));
        for b in 1..=3 {
            let zero = RapsParams::new(0.0, b).unwrap();
            assert!(close(raps_score(&p, 1, zero).unwrap(), 0.8));
        }
        assert!(RapsParams::new(-0.1, 1).is_err());
        assert!(RapsParams::new(0.1, 0).is_err());
        assert!(raps_score(&p, 0, RapsParams::new(0.1, 4).unwrap()).is_err());
    }

    #[test]
    fn randomized_raps_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let params = RapsParams::new(0.1, 1).unwrap();
        assert!(close(
            raps_score_randomized(&p, 1, params, 0.5).unwrap(),
            0.7
        ));
        assert!(close(
            raps_score_randomized(&p, 0, params, 0.0).unwrap(),
            0.0
        ));
        for y in 0..3 {
            assert!(close(
                raps_score_randomized(&p, y, params, 1.0).unwrap(),
                raps_score(&p, y, params).unwrap()
            ));
        }
    }

    fn simplex_and_label() -> impl Strategy<Value = (ProbabilityVector, usize)> {
        (2usize..9).prop_flat_map(|k| {
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
        fn randomized_aps_is_monotone_in_u((p, y) in simplex_and_label(), u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            prop_assert!(aps_score_randomized(&p, y, lo).unwrap() <= aps_score_randomized(&p, y, hi).unwrap());
            let unique = p.as_slice().iter().filter(|&&q| q == p.as_slice()[y]).count() == 1;
            if unique {
                prop_assert!((aps_score_randomized(&p, y, 1.0).unwrap() - aps_score(&p, y).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn raps_without_penalty_is_aps((p, y) in simplex_and_label(), b in 1usize..9) {
            let params = RapsParams::new(0.0, b.min(p.k())).unwrap();
            prop_assert_eq!(raps_score(&p, y, params).unwrap(), aps_score(&p, y).unwrap());
        }

        #[test]
        fn aps_equals_mass_of_at_least_as_likely((p, y) in simplex_and_label()) {
            let py = p.as_slice()[y];
            let direct: f64 = p.as_slice().iter().filter(|&&q| q >= py).sum();
            prop_assert!((aps_score(&p, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_label_includes_whole_tie_group() {
        let p = pv(&[0.2, 0.4, 0.4]);
        // both tied classes score the full mass of the tie group
        assert!(close(aps_score(&p, 1).unwrap(), 0.8));
        assert!(close(aps_score(&p, 2).unwrap(), 0.8));
        // the randomized score only counts strictly more likely classes
        assert!(close(aps_score_randomized(&p, 2, 0.5).unwrap(), 0.2));
        // RAPS ranks: class 1 is rank 1, class 2 is rank 2; both score through rank 2
        let params = RapsParams::new(0.1, 1).unwrap();
        assert!(close(raps_score(&p, 1, params).unwrap(), 0.9));
        assert!(close(raps_score(&p, 2, params).unwrap(), 0.9));
    }
}
