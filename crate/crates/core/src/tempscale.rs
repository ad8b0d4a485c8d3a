//! Temperature scaling: one scalar `T` divides every logit before the softmax
//! and is fitted by minimizing the negative log-likelihood on labeled data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::ProbabilityVector;

/// Default search interval for `T`.
pub const DEFAULT_BOUNDS: (f64, f64) = (0.05, 20.0);
/// Absolute tolerance on `T` for the golden-section search.
pub const TOLERANCE: f64 = 1e-4;
/// Smallest split a temperature can be fitted on.
pub const MIN_EXAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub temperature: f64,
}

impl TemperatureModel {
    pub fn new(temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self { temperature })
    }

    pub fn identity() -> Self {
        Self { temperature: 1.0 }
    }

    pub fn apply(&self, logits: &[f64]) -> Result<ProbabilityVector> {
        apply_temperature(logits, self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "temperature",
            format!("{t} must be finite and > 0"),
        ))
    }
}

/// `softmax(logits / t)` with the maximum subtracted first.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<ProbabilityVector> {
    check_temperature(t)?;
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::invalid("logits", format!("entry {i} is not finite")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbabilityVector::new(exps.into_iter().map(|e| e / total).collect())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn nll<R: AsRef<[f64]>>(logits: &[R], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let row = row.as_ref();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|l| ((l - max) / t).exp()).sum::<f64>().ln();
            lse - (row[y] - max) / t
        })
        .sum();
    total / logits.len() as f64
}

/// Fits `T` in `bounds` by golden-section search on the NLL. The identity
/// `T = 1` is also evaluated and wins if the search lands somewhere worse.
pub fn fit_temperature<R: AsRef<[f64]>>(
    logits: &[R],
    labels: &[usize],
    bounds: Option<(f64, f64)>,
) -> Result<TemperatureModel> {
    let (lo, hi) = bounds.unwrap_or(DEFAULT_BOUNDS);
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::invalid(
            "bounds",
            format!("({lo}, {hi}) is not a positive interval"),
        ));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            context: "labels vs logit rows",
            expected: logits.len(),
            found: labels.len(),
        });
    }
    if logits.len() < MIN_EXAMPLES {
        return Err(Error::invalid(
            "logits",
            format!("{} rows, need at least {MIN_EXAMPLES}", logits.len()),
        ));
    }
    let k = logits[0].as_ref().len();
    for (i, (row, &y)) in logits.iter().zip(labels).enumerate() {
        let row = row.as_ref();
        if row.len() != k {
            return Err(Error::Shape {
                context: "logit row length",
                expected: k,
                found: row.len(),
            });
        }
        if row.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid(
                "logits",
                format!("row {i} has a non-finite entry"),
            ));
        }
        if y >= k {
            return Err(Error::ClassOutOfRange { class: y, k });
        }
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::invalid("labels", "only one class present"));
    }

    let f = |t: f64| nll(logits, labels, t);
    let t = golden_section(f, lo, hi, TOLERANCE);
    let best = if lo <= 1.0 && 1.0 <= hi && f(1.0) < f(t) {
        1.0
    } else {
        t
    };
    log::debug!("fitted temperature {best:.4} (nll {:.5})", f(best));
    TemperatureModel::new(best)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}
