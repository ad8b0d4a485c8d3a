//! Seeded train / validation / test preparation of a stored dataset.

use crate::dataio::{split, Dataset, ScoreKind, Split};
use crate::error::Result;
use crate::example::LabeledExample;
use crate::seed::derive_seed;
use crate::tempscale::fit_temperature;

/// Split rows and their probabilities.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub split: Split,
    /// Softmax temperature used for every fold; `None` for stored
    /// probabilities.
    pub temperature: Option<f64>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Shuffles rows with `(seed, "split")`, then settles the temperature: the
/// manifest value wins, otherwise it is fitted on the validation fold when
/// `temperature_scaling` is set (and the fold is non-empty), otherwise 1.
pub fn prepare_split(
    ds: &Dataset,
    fractions: [f64; 3],
    seed: u64,
    temperature_scaling: bool,
) -> Result<PreparedSplit> {
    ds.validate()?;
    let s = split(ds.n(), fractions, derive_seed(seed, "split", 0))?;
    let temperature = match ds.kind {
        ScoreKind::Probabilities => None,
        ScoreKind::Logits => Some(match ds.temperature {
            Some(t) => t,
            None if temperature_scaling && !s.val.is_empty() => {
                let logits: Vec<Vec<f64>> = s.val.iter().map(|&i| ds.scores.row_f64(i)).collect();
                let labels: Vec<usize> = s.val.iter().map(|&i| ds.labels[i] as usize).collect();
                fit_temperature(&logits, &labels, None)?.temperature
            }
            None => 1.0,
        }),
    };
    Ok(PreparedSplit {
        train: ds.examples(&s.train, temperature)?,
        val: ds.examples(&s.val, temperature)?,
        test: ds.examples(&s.test, temperature)?,
        temperature,
        split: s,
    })
}
