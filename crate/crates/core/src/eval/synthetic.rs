//! Synthetic classification task with known conditionals.
//!
//! Class means `mu_c` are drawn once per task. A sample picks a class `c`
//! uniformly, draws `x0 ~ N(mu_c, I)` and a difficulty temperature `tau`
//! (log-uniform), and gets true logits
//! `l_j = (mu_j . x0 - |mu_j|^2 / 2) / tau`. The label is drawn from
//! `softmax(l)`, so `P(y | x0, tau)` is known exactly. The feature vector is
//! `[x0, ln tau]`; the emitted classifier logits are `distortion * l`.
//!
//! All emitted numbers are rounded to `f32` first, so a task written to disk
//! and read back describes the same distribution.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Matrix, ScoreKind};
use crate::error::{Error, Result};
use crate::example::LabeledExample;
use crate::seed::rng_for;
use crate::set::{build_prediction_set, PredictionSet};
use crate::simplex::ProbabilityVector;
use crate::tempscale::apply_temperature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub k: usize,
    /// Feature dimension, including the trailing `ln tau` coordinate.
    pub d: usize,
    /// Scale of the class means; larger is easier.
    pub separation: f64,
    /// Draw a per-sample temperature; otherwise `tau = 1`.
    pub heteroscedastic: bool,
    pub tau_range: (f64, f64),
    /// Factor applied to the true logits before they are emitted.
    pub distortion: f64,
    /// Every sample gets `x0 = 0` and `tau = 1`.
    pub identical: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            k: 11,
            d: 64,
            separation: 3.0,
            heteroscedastic: true,
            tau_range: (0.5, 3.0),
            distortion: 1.0,
            identical: false,
            seed: 0,
        }
    }
}

/// A generator with fixed class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    means: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.k < 2 {
            return Err(Error::invalid(
                "k",
                format!("{} classes, need at least 2", config.k),
            ));
        }
        if config.d < 2 {
            return Err(Error::invalid(
                "d",
                format!("{} features, need at least 2", config.d),
            ));
        }
        if !(config.separation.is_finite() && config.separation >= 0.0) {
            return Err(Error::invalid("separation", "must be finite and >= 0"));
        }
        let (lo, hi) = config.tau_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(
                "tau_range",
                format!("({lo}, {hi}) is not a positive range"),
            ));
        }
        if !(config.distortion.is_finite() && config.distortion > 0.0) {
            return Err(Error::invalid("distortion", "must be finite and > 0"));
        }
        let dim = config.d - 1;
        let scale = config.separation / (dim as f64).sqrt();
        let mut rng = rng_for(config.seed, "synthetic-means", 0);
        let means = (0..config.k)
            .map(|_| (0..dim).map(|_| scale * normal(&mut rng)).collect())
            .collect();
        Ok(Self { config, means })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// True logits for features `[x0, ln tau]`.
    pub fn true_logits(&self, features: &[f64]) -> Vec<f64> {
        let (x0, log_tau) = features.split_at(features.len() - 1);
        let tau = log_tau[0].exp();
        self.means
            .iter()
            .map(|mu| {
                let dot: f64 = mu.iter().zip(x0).map(|(m, x)| m * x).sum();
                let norm: f64 = mu.iter().map(|m| m * m).sum();
                (dot - norm / 2.0) / tau
            })
            .collect()
    }
}

/// Generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub features: Vec<Vec<f64>>,
    /// Classifier logits as emitted (after distortion).
    pub logits: Vec<Vec<f64>>,
    /// Exact `P(y | x)`.
    pub true_probs: Vec<ProbabilityVector>,
    pub labels: Vec<usize>,
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labeled examples with probabilities `softmax(logits / t)`.
    pub fn examples(&self, t: f64) -> Result<Vec<LabeledExample>> {
        (0..self.len())
            .map(|i| {
                LabeledExample::new(
                    self.features[i].clone(),
                    apply_temperature(&self.logits[i], t)?,
                    self.labels[i],
                )
            })
            .collect()
    }

    /// On-disk form; logits are stored raw.
    pub fn to_dataset(&self, name: &str) -> Result<Dataset> {
        let f32_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f32>> {
            rows.iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect()
        };
        Ok(Dataset {
            name: name.to_string(),
            kind: ScoreKind::Logits,
            temperature: None,
            class_names: None,
            features: Matrix::from_rows(&f32_rows(&self.features))?,
            scores: Matrix::from_rows(&f32_rows(&self.logits))?,
            labels: self.labels.iter().map(|&y| y as u32).collect(),
        })
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws `n` i.i.d. samples from `task` under `seed`.
pub fn generate_synthetic(task: &SyntheticTask, n: usize, seed: u64) -> Result<SyntheticData> {
    let cfg = &task.config;
    let mut rng = rng_for(seed, "synthetic-samples", 0);
    let (lo, hi) = cfg.tau_range;
    let mut out = SyntheticData {
        features: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        true_probs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let c = rng.gen_range(0..cfg.k);
        let mut features: Vec<f64> = if cfg.identical {
            vec![0.0; cfg.d - 1]
        } else {
            task.means[c]
                .iter()
                .map(|m| round32(m + normal(&mut rng)))
                .collect()
        };
        let tau = if cfg.heteroscedastic && !cfg.identical {
            rng.gen_range(lo.ln()..=hi.ln())
        } else {
            0.0
        };
        features.push(round32(tau));
        let logits: Vec<f64> = task
            .true_logits(&features)
            .into_iter()
            .map(round32)
            .collect();
        let p = apply_temperature(&logits, 1.0)?;
        let y = WeightedIndex::new(p.as_slice())
            .map_err(|e| Error::Numerical(format!("label distribution: {e}")))?
            .sample(&mut rng);
        out.logits
            .push(logits.iter().map(|l| round32(cfg.distortion * l)).collect());
        out.features.push(features);
        out.true_probs.push(p);
        out.labels.push(y);
    }
    Ok(out)
}

/// Smallest set whose true conditional mass reaches `1 - alpha`.
pub fn oracle_set(true_probs: &ProbabilityVector, alpha: f64) -> PredictionSet {
    build_prediction_set(true_probs, 1.0 - alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(cfg: SyntheticConfig) -> SyntheticTask {
        SyntheticTask::new(cfg).unwrap()
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let t = task(SyntheticConfig {
            k: 4,
            d: 5,
            ..SyntheticConfig::default()
        });
        let a = generate_synthetic(&t, 50, 3).unwrap();
        assert_eq!(a, generate_synthetic(&t, 50, 3).unwrap());
        assert_ne!(a, generate_synthetic(&t, 50, 4).unwrap());
    }

    #[test]
    fn undistorted_logits_are_the_conditionals() {
        let t = task(SyntheticConfig {
            k: 5,
            d: 6,
            ..SyntheticConfig::default()
        });
        let data = generate_synthetic(&t, 100, 1).unwrap();
        for i in 0..data.len() {
            assert_eq!(
                apply_temperature(&data.logits[i], 1.0).unwrap(),
                data.true_probs[i]
            );
            let again: Vec<f64> = t
                .true_logits(&data.features[i])
                .into_iter()
                .map(round32)
                .collect();
            assert_eq!(again, data.logits[i]);
        }
        let doubled = task(SyntheticConfig {
            distortion: 2.0,
            ..t.config.clone()
        });
        let d2 = generate_synthetic(&doubled, 100, 1).unwrap();
        assert_eq!(
            apply_temperature(&d2.logits[0], 2.0).unwrap().argmax(),
            data.true_probs[0].argmax()
        );
    }

    #[test]
    fn labels_follow_the_conditionals() {
        let t = task(SyntheticConfig {
            k: 3,
            d: 4,
            separation: 1.0,
            ..SyntheticConfig::default()
        });
        let data = generate_synthetic(&t, 20_000, 2).unwrap();
        let expected: f64 = data
            .true_probs
            .iter()
            .zip(&data.labels)
            .map(|(p, _)| p.max())
            .sum::<f64>()
            / data.len() as f64;
        let hits = data
            .true_probs
            .iter()
            .zip(&data.labels)
            .filter(|(p, &y)| p.argmax() == y)
            .count() as f64
            / data.len() as f64;
        assert!((hits - expected).abs() < 0.015, "{hits} vs {expected}");
    }

    #[test]
    fn identical_samples() {
        let t = task(SyntheticConfig {
            k: 4,
            d: 3,
            identical: true,
            ..SyntheticConfig::default()
        });
        let data = generate_synthetic(&t, 10, 0).unwrap();
        assert!(data.logits.windows(2).all(|w| w[0] == w[1]));
        assert!(data.features.iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn oracle_sets_cover_in_expectation() {
        let t = task(SyntheticConfig {
            k: 6,
            d: 8,
            separation: 2.0,
            ..SyntheticConfig::default()
        });
        let data = generate_synthetic(&t, 2000, 5).unwrap();
        let alpha = 0.1;
        let expected: f64 = data
            .true_probs
            .iter()
            .map(|p| {
                oracle_set(p, alpha)
                    .classes
                    .iter()
                    .map(|&c| p.as_slice()[c])
                    .sum::<f64>()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(expected >= 1.0 - alpha - 1e-9);
    }

    #[test]
    fn round_trips_through_dataset_files() {
        let t = task(SyntheticConfig {
            k: 3,
            d: 4,
            ..SyntheticConfig::default()
        });
        let data = generate_synthetic(&t, 20, 9).unwrap();
        let ds = data.to_dataset("synth").unwrap();
        for i in 0..data.len() {
            assert_eq!(ds.features.row_f64(i), data.features[i]);
            assert_eq!(ds.scores.row_f64(i), data.logits[i]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SyntheticTask::new(SyntheticConfig {
            k: 1,
            ..SyntheticConfig::default()
        })
        .is_err());
        assert!(SyntheticTask::new(SyntheticConfig {
            d: 1,
            ..SyntheticConfig::default()
        })
        .is_err());
        assert!(SyntheticTask::new(SyntheticConfig {
            tau_range: (2.0, 1.0),
            ..SyntheticConfig::default()
        })
        .is_err());
    }
}
