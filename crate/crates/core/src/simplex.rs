//! Probability vectors and their descending ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed distance of a probability vector's sum from one. Vectors within
/// the tolerance are renormalized, anything further off is rejected.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// One sample's class probabilities: `k >= 2` non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidProbability {
                index: probs.len(),
                reason: format!("missing: need at least 2 classes, got {}", probs.len()),
            });
        }
        for (index, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidProbability {
                    index,
                    reason: format!("is not finite ({p})"),
                });
            }
            if p < 0.0 {
                return Err(Error::InvalidProbability {
                    index,
                    reason: format!("is negative ({p})"),
                });
            }
            if p > 1.0 + SUM_TOLERANCE {
                return Err(Error::InvalidProbability {
                    index,
                    reason: format!("exceeds one ({p})"),
                });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            // Name the entry where the running sum first leaves the simplex, or the last one.
            let mut acc = 0.0;
            let index = probs
                .iter()
                .position(|&p| {
                    acc += p;
                    acc > 1.0 + SUM_TOLERANCE
                })
                .unwrap_or(probs.len() - 1);
            return Err(Error::InvalidProbability {
                index,
                reason: format!("leaves the vector summing to {sum}, not 1"),
            });
        }
        let probs = if sum == 1.0 {
            probs
        } else {
            probs.into_iter().map(|p| p / sum).collect()
        };
        Ok(Self(probs))
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> Result<f64> {
        self.0
            .get(class)
            .copied()
            .ok_or(Error::ClassOutOfRange { class, k: self.k() })
    }

    /// Largest class probability (the model's confidence).
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        self.rank().order[0]
    }

    pub fn rank(&self) -> RankedProbabilities {
        rank(self)
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(value: ProbabilityVector) -> Self {
        value.0
    }
}

/// Classes ordered from most to least likely, with running probability mass.
///
/// Ties are broken by ascending class index. Tied classes occupy consecutive
/// ranks and share one tie group.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedProbabilities {
    /// `order[r]` is the class at rank `r` (0-based).
    pub order: Vec<usize>,
    /// Probability of the class at each rank.
    pub sorted: Vec<f64>,
    /// `cumsum[r]` is the mass of ranks `0..=r`.
    pub cumsum: Vec<f64>,
    position: Vec<usize>,
    tie_start: Vec<usize>,
    tie_end: Vec<usize>,
}

impl RankedProbabilities {
    pub fn k(&self) -> usize {
        self.order.len()
    }

    /// Rank (0-based) of `class`.
    pub fn position(&self, class: usize) -> Result<usize> {
        self.position
            .get(class)
            .copied()
            .ok_or(Error::ClassOutOfRange { class, k: self.k() })
    }

    /// First rank of the tie group containing rank `r`.
    pub fn tie_start(&self, r: usize) -> usize {
        self.tie_start[r]
    }

    /// Last rank of the tie group containing rank `r`.
    pub fn tie_end(&self, r: usize) -> usize {
        self.tie_end[r]
    }

    /// Mass of ranks `0..r`, i.e. strictly before rank `r`.
    pub fn mass_before(&self, r: usize) -> f64 {
        if r == 0 {
            0.0
        } else {
            self.cumsum[r - 1]
        }
    }
}

/// Sorts classes by descending probability (ascending index on ties).
pub fn rank(p: &ProbabilityVector) -> RankedProbabilities {
    let probs = p.as_slice();
    let k = probs.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let sorted: Vec<f64> = order.iter().map(|&c| probs[c]).collect();
    let cumsum: Vec<f64> = sorted
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let mut position = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        position[c] = r;
    }

    let mut tie_start = vec![0; k];
    for r in 1..k {
        tie_start[r] = if sorted[r] == sorted[r - 1] {
            tie_start[r - 1]
        } else {
            r
        };
    }
    let mut tie_end = vec![k - 1; k];
    for r in (0..k - 1).rev() {
        tie_end[r] = if sorted[r] == sorted[r + 1] {
            tie_end[r + 1]
        } else {
            r
        };
    }

    RankedProbabilities {
        order,
        sorted,
        cumsum,
        position,
        tie_start,
        tie_end,
    }
}
