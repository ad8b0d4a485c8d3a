use crate::error::{Error, Result};
use crate::simplex::ProbabilityVector;

/// One labeled sample: feature embedding, classifier probabilities, true class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub probs: ProbabilityVector,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, probs: ProbabilityVector, label: usize) -> Result<Self> {
        if label >= probs.k() {
            return Err(Error::ClassOutOfRange {
                class: label,
                k: probs.k(),
            });
        }
        Ok(Self {
            features,
            probs,
            label,
        })
    }
}

/// Checks that a split is nonempty and shares one class count and one
/// feature dimension. Returns `(k, d)`.
pub fn check_split(examples: &[LabeledExample], what: &'static str) -> Result<(usize, usize)> {
    let first = examples.first().ok_or(Error::Empty(what))?;
    let (k, d) = (first.probs.k(), first.features.len());
    for ex in examples {
        if ex.probs.k() != k {
            return Err(Error::Shape {
                context: "class count",
                expected: k,
                found: ex.probs.k(),
            });
        }
        if ex.features.len() != d {
            return Err(Error::Shape {
                context: "feature dimension",
                expected: d,
                found: ex.features.len(),
            });
        }
    }
    Ok((k, d))
}
