//! Metrics, reports and the repeated-split experiment runner.

mod experiment;
mod synthetic;

pub use experiment::{run_experiment, DataSource, ExperimentConfig, ExperimentReport, SplitSpec};
pub use synthetic::{
    generate_synthetic, oracle_set, SyntheticConfig, SyntheticData, SyntheticTask,
};

use serde::{Deserialize, Serialize};

use crate::conformal::Method;
use crate::cpsn::ResidualSummary;
use crate::error::{Error, Result};
use crate::score::RapsParams;
use crate::set::PredictionSet;

/// Fraction of examples whose label is in their set.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() {
        return Err(Error::Shape {
            context: "labels vs prediction sets",
            expected: sets.len(),
            found: labels.len(),
        });
    }
    if sets.is_empty() {
        return Err(Error::Empty("prediction sets"));
    }
    let hits = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Mean set cardinality.
pub fn avg_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Empty("prediction sets"));
    }
    Ok(sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64)
}

/// One method's result on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub coverage: f64,
    pub size: f64,
    /// Global threshold of single-threshold methods.
    #[serde(default, with = "crate::json::opt_extended_f64")]
    pub q: Option<f64>,
    #[serde(default)]
    pub raps: Option<RapsParams>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default, with = "crate::json::opt_extended_f64")]
    pub delta1: Option<f64>,
    #[serde(default, with = "crate::json::opt_extended_f64")]
    pub delta2: Option<f64>,
    /// Per-sample residual statistics of CPSN's two groups.
    #[serde(default)]
    pub residuals: Option<ResidualSummary>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Summation runs in slice order, so results are reproducible.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// One method at one miscoverage level, aggregated over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub alpha: f64,
    /// Calibration (validation) rows per trial.
    pub n_cal: usize,
    pub n_test: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    /// Standard error of the trial-mean coverage: `coverage_std / sqrt(trials)`.
    pub coverage_se: f64,
    /// Test-sampling-only binomial standard error of the trial mean.
    pub coverage_se_binomial: f64,
    pub size_mean: f64,
    pub size_std: f64,
    /// Trial statistics of the CPSN corrections (over trials, not samples).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta1: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta2: Option<MeanStd>,
    pub trials: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn from_trials(
        method: Method,
        alpha: f64,
        n_cal: usize,
        n_test: usize,
        trials: Vec<TrialRecord>,
    ) -> Self {
        let cov: Vec<f64> = trials.iter().map(|t| t.coverage).collect();
        let size: Vec<f64> = trials.iter().map(|t| t.size).collect();
        let c = MeanStd::of(&cov);
        let s = MeanStd::of(&size);
        let m = trials.len().max(1) as f64;
        let finite = |f: fn(&TrialRecord) -> Option<f64>| {
            let v: Vec<f64> = trials
                .iter()
                .filter_map(f)
                .filter(|d| d.is_finite())
                .collect();
            (!v.is_empty()).then(|| MeanStd::of(&v))
        };
        Self {
            method,
            alpha,
            n_cal,
            n_test,
            coverage_mean: c.mean,
            coverage_std: c.std,
            coverage_se: c.std / m.sqrt(),
            coverage_se_binomial: (c.mean * (1.0 - c.mean) / (n_test.max(1) as f64 * m)).sqrt(),
            size_mean: s.mean,
            size_std: s.std,
            delta1: finite(|t| t.delta1),
            delta2: finite(|t| t.delta2),
            trials,
        }
    }

    /// `[1 - alpha - z*se, 1 - alpha + 1/(n_cal + 1) + z*se]` with the
    /// empirical `se = coverage_se`.
    pub fn coverage_band(&self, z: f64) -> (f64, f64) {
        let target = 1.0 - self.alpha;
        (
            target - z * self.coverage_se,
            target + 1.0 / (self.n_cal as f64 + 1.0) + z * self.coverage_se,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(classes: &[usize]) -> PredictionSet {
        PredictionSet {
            classes: classes.to_vec(),
            threshold_used: 0.5,
        }
    }

    #[test]
    fn coverage_examples() {
        let full = vec![set(&[0, 1, 2]); 4];
        assert_eq!(coverage(&full, &[0, 1, 2, 0]).unwrap(), 1.0);
        let top = vec![set(&[1]), set(&[0])];
        assert_eq!(coverage(&top, &[1, 0]).unwrap(), 1.0);
        let c = coverage(&[set(&[0]), set(&[1]), set(&[2])], &[0, 1, 0]).unwrap();
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
        assert!(coverage(&[], &[]).is_err());
        assert!(coverage(&full, &[0]).is_err());
    }

    #[test]
    fn size_examples() {
        assert_eq!(avg_size(&[set(&[0]), set(&[3])]).unwrap(), 1.0);
        assert_eq!(
            avg_size(&[set(&[0]), set(&[0, 1]), set(&[0, 1, 2])]).unwrap(),
            2.0
        );
        let all: Vec<usize> = (0..11).collect();
        assert_eq!(avg_size(&vec![set(&all); 5]).unwrap(), 11.0);
        assert!(avg_size(&[]).is_err());
    }

    #[test]
    fn report_statistics() {
        let rec = |c: f64, s: f64| TrialRecord {
            trial: 0,
            seed: 0,
            coverage: c,
            size: s,
            q: None,
            raps: None,
            temperature: None,
            delta1: Some(f64::INFINITY),
            delta2: Some(0.1),
            residuals: None,
        };
        let r = EvalReport::from_trials(
            Method::Cpsn,
            0.1,
            50,
            100,
            vec![rec(0.9, 2.0), rec(0.92, 3.0)],
        );
        assert!((r.coverage_mean - 0.91).abs() < 1e-12);
        assert!((r.size_std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((r.coverage_se - r.coverage_std / 2f64.sqrt()).abs() < 1e-15);
        assert!(r.delta1.is_none());
        assert_eq!(r.delta2.unwrap().mean, 0.1);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.trials[0].delta1, Some(f64::INFINITY));
    }
}
