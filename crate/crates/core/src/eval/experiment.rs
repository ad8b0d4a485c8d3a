use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    avg_size, coverage, generate_synthetic, EvalReport, SyntheticConfig, SyntheticTask, TrialRecord,
};
use crate::conformal::{calibrate_with_policy, naive_threshold, tune_raps, Method, RapsGrid};
use crate::cpsn::{conformalize_with_policy, train_phase};
use crate::dataio::{split, split_counts, Dataset, ScoreKind};
use crate::error::{check_alpha, Error, Result};
use crate::example::LabeledExample;
use crate::regressor::TrainConfig;
use crate::seed::derive_seed;
use crate::set::{PredictionSet, SetPolicy};
use crate::simplex::ProbabilityVector;
use crate::tempscale::{apply_temperature, fit_temperature};

/// How each trial's rows are divided into train / validation / test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
    /// Fractions of `n` rows; `n` defaults to the dataset size and is
    /// required for synthetic sources.
    Fractions {
        fractions: [f64; 3],
        n: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub split: SplitSpec,
    /// RAPS candidates; defaults to [`RapsGrid::default_for`].
    pub raps_grid: Option<RapsGrid>,
    /// At most this many training rows are used to tune RAPS.
    pub raps_tune_max: usize,
    pub cpsn: TrainConfig,
    pub set_policy: SetPolicy,
    /// Fit a temperature on the validation fold when logits are stored and
    /// no temperature is recorded with the data.
    pub temperature_scaling: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            alphas: vec![0.1, 0.05],
            trials: 10,
            seed: 0,
            split: SplitSpec::Fractions {
                fractions: [0.8, 0.1, 0.1],
                n: None,
            },
            raps_grid: None,
            raps_tune_max: 2000,
            cpsn: TrainConfig::default(),
            set_policy: SetPolicy::default(),
            temperature_scaling: true,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials", "need at least one trial"));
        }
        if self.methods.is_empty() {
            return Err(Error::Empty("method list"));
        }
        if self.alphas.is_empty() {
            return Err(Error::Empty("alpha list"));
        }
        for &a in &self.alphas {
            check_alpha(a)?;
        }
        if self.methods.contains(&Method::Cpsn) {
            self.cpsn.validate()?;
        }
        Ok(())
    }

    fn needs_train(&self) -> bool {
        self.methods
            .iter()
            .any(|m| m.uses_raps() || *m == Method::Cpsn)
    }

    fn needs_val(&self) -> bool {
        self.methods.iter().any(|m| *m != Method::Naive)
    }
}

/// Where trial data comes from.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// Fresh i.i.d. draws for every trial.
    Synthetic(&'a SyntheticTask),
    /// Reshuffled splits of a fixed dataset.
    Dataset(&'a Dataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub config: ExperimentConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// One entry per (method, alpha), methods in configured order.
    pub reports: Vec<EvalReport>,
}

/// Raw rows of one fold before probabilities are formed.
struct Fold {
    features: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Fold {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn examples(&self, kind: ScoreKind, t: f64) -> Result<Vec<LabeledExample>> {
        (0..self.len())
            .map(|i| {
                let p = match kind {
                    ScoreKind::Logits => apply_temperature(&self.scores[i], t)?,
                    ScoreKind::Probabilities => ProbabilityVector::new(self.scores[i].clone())?,
                };
                LabeledExample::new(self.features[i].clone(), p, self.labels[i])
            })
            .collect()
    }
}

fn counts_for(spec: &SplitSpec, available: Option<usize>) -> Result<[usize; 3]> {
    match *spec {
        SplitSpec::Counts { train, val, test } => Ok([train, val, test]),
        SplitSpec::Fractions { fractions, n } => {
            let n = n.or(available).ok_or_else(|| {
                Error::invalid("split", "fractions need a row count for synthetic data")
            })?;
            let s = split(n, fractions, 0)?;
            Ok([s.train.len(), s.val.len(), s.test.len()])
        }
    }
}

fn folds(source: DataSource<'_>, spec: &SplitSpec, seed: u64) -> Result<[Fold; 3]> {
    match source {
        DataSource::Synthetic(task) => {
            let [a, b, c] = counts_for(spec, None)?;
            let data = generate_synthetic(task, a + b + c, derive_seed(seed, "data", 0))?;
            let take = |r: std::ops::Range<usize>| Fold {
                features: data.features[r.clone()].to_vec(),
                scores: data.logits[r.clone()].to_vec(),
                labels: data.labels[r].to_vec(),
            };
            Ok([take(0..a), take(a..a + b), take(a + b..a + b + c)])
        }
        DataSource::Dataset(ds) => {
            let n = ds.n();
            let split_seed = derive_seed(seed, "split", 0);
            let s = match *spec {
                SplitSpec::Counts { train, val, test } => {
                    let mut s = split_counts(n, [train, val], split_seed)?;
                    if test > s.test.len() {
                        return Err(Error::invalid(
                            "split",
                            format!("{test} test rows requested, {} left", s.test.len()),
                        ));
                    }
                    s.test.truncate(test);
                    s
                }
                SplitSpec::Fractions {
                    fractions,
                    n: limit,
                } => {
                    let m = limit.unwrap_or(n).min(n);
                    let mut s = split(n, [1.0, 0.0, 0.0], split_seed)?;
                    s.train.truncate(m);
                    let order = s.train;
                    let sub = split(m, fractions, split_seed)?;
                    crate::dataio::Split {
                        train: sub.train.iter().map(|&i| order[i]).collect(),
                        val: sub.val.iter().map(|&i| order[i]).collect(),
                        test: sub.test.iter().map(|&i| order[i]).collect(),
                    }
                }
            };
            let take = |rows: &[usize]| Fold {
                features: rows.iter().map(|&i| ds.features.row_f64(i)).collect(),
                scores: rows.iter().map(|&i| ds.scores.row_f64(i)).collect(),
                labels: rows.iter().map(|&i| ds.labels[i] as usize).collect(),
            };
            Ok([take(&s.train), take(&s.val), take(&s.test)])
        }
    }
}

type TrialOutput = Vec<TrialRecord>;

fn run_trial(source: DataSource<'_>, cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutput> {
    let seed = derive_seed(cfg.seed, "trial", trial as u64);
    let [train, val, test] = folds(source, &cfg.split, seed)?;
    if test.len() == 0 {
        return Err(Error::Empty("test fold"));
    }
    if cfg.needs_val() && val.len() == 0 {
        return Err(Error::Empty("validation fold"));
    }
    if cfg.needs_train() && train.len() == 0 {
        return Err(Error::Empty("training fold"));
    }

    let (kind, stored_t) = match source {
        DataSource::Synthetic(_) => (ScoreKind::Logits, None),
        DataSource::Dataset(ds) => (ds.kind, ds.temperature),
    };
    let temperature = match kind {
        ScoreKind::Probabilities => None,
        ScoreKind::Logits => Some(match stored_t {
            Some(t) => t,
            None if cfg.temperature_scaling => {
                fit_temperature(&val.scores, &val.labels, None)?.temperature
            }
            None => 1.0,
        }),
    };
    let t = temperature.unwrap_or(1.0);
    let train = train.examples(kind, t)?;
    let val = val.examples(kind, t)?;
    let test = test.examples(kind, t)?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();

    let cpsn_model = if cfg.methods.contains(&Method::Cpsn) {
        let config = TrainConfig {
            seed: derive_seed(seed, "cpsn", 0),
            ..cfg.cpsn.clone()
        };
        Some((train_phase(&train, &config)?.model, config))
    } else {
        None
    };
    let tune_rows = &train[..train.len().min(cfg.raps_tune_max)];

    let mut out = Vec::with_capacity(cfg.methods.len() * cfg.alphas.len());
    for &method in &cfg.methods {
        for &alpha in &cfg.alphas {
            let mut record = TrialRecord {
                trial,
                seed,
                coverage: 0.0,
                size: 0.0,
                q: None,
                raps: None,
                temperature,
                delta1: None,
                delta2: None,
                residuals: None,
            };
            let sets: Vec<PredictionSet> = match method {
                Method::Cpsn => {
                    let (model, config) = cpsn_model.clone().expect("trained above");
                    let c = conformalize_with_policy(model, config, &val, alpha, cfg.set_policy)?;
                    record.delta1 = Some(c.delta1);
                    record.delta2 = Some(c.delta2);
                    record.residuals = Some(c.residuals);
                    test.iter()
                        .map(|e| c.predict(&e.features, &e.probs))
                        .collect::<Result<_>>()?
                }
                _ => {
                    let threshold = if method == Method::Naive {
                        naive_threshold(alpha)?
                    } else {
                        let raps = if method.uses_raps() {
                            let k = val[0].probs.k();
                            let grid = cfg
                                .raps_grid
                                .clone()
                                .unwrap_or_else(|| RapsGrid::default_for(k));
                            Some(tune_raps(tune_rows, alpha, &grid, cfg.set_policy)?)
                        } else {
                            None
                        };
                        calibrate_with_policy(&val, alpha, method, raps, seed, cfg.set_policy)?
                    };
                    record.q = Some(threshold.q);
                    record.raps = threshold.raps;
                    test.iter()
                        .enumerate()
                        .map(|(i, e)| threshold.predict_set(&e.probs, i as u64))
                        .collect::<Result<_>>()?
                }
            };
            record.coverage = coverage(&sets, &labels)?;
            record.size = avg_size(&sets)?;
            out.push(record);
        }
    }
    Ok(out)
}

/// Runs `config.trials` independent trials (in parallel) and aggregates
/// per method and alpha. Results depend only on the seed, not on scheduling.
pub fn run_experiment(
    source: DataSource<'_>,
    name: &str,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let available = match source {
        DataSource::Synthetic(_) => None,
        DataSource::Dataset(ds) => Some(ds.n()),
    };
    let [n_train, n_val, n_test] = match (&config.split, available) {
        (SplitSpec::Fractions { fractions, n }, Some(total)) => {
            let s = split(n.unwrap_or(total).min(total), *fractions, 0)?;
            [s.train.len(), s.val.len(), s.test.len()]
        }
        (spec, avail) => counts_for(spec, avail)?,
    };

    let per_trial: Vec<TrialOutput> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(source, config, t))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    let mut slot = 0;
    for &method in &config.methods {
        for &alpha in &config.alphas {
            let trials: Vec<TrialRecord> = per_trial.iter().map(|t| t[slot].clone()).collect();
            reports.push(EvalReport::from_trials(
                method, alpha, n_val, n_test, trials,
            ));
            slot += 1;
        }
    }
    Ok(ExperimentReport {
        name: name.to_string(),
        synthetic: match source {
            DataSource::Synthetic(task) => Some(task.config.clone()),
            DataSource::Dataset(_) => None,
        },
        config: config.clone(),
        n_train,
        n_val,
        n_test,
        reports,
    })
}

impl ExperimentReport {
    pub fn get(&self, method: Method, alpha: f64) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.alpha == alpha)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Methods as rows, `size` and `coverage` (mean ± std) per alpha.
    pub fn table(&self) -> String {
        let cell = |m: f64, s: f64| format!("{m:.3} ± {s:.3}");
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({} trials, n_test = {})",
            self.name, self.config.trials, self.n_test
        );
        let _ = write!(out, "{:<10}", "");
        for a in &self.config.alphas {
            let _ = write!(out, " | {:^31}", format!("alpha = {a}"));
        }
        let _ = writeln!(out);
        let _ = write!(out, "{:<10}", "Method");
        for _ in &self.config.alphas {
            let _ = write!(out, " | {:<15} {:<15}", "Size", "Coverage");
        }
        let _ = writeln!(out);
        for &method in &self.config.methods {
            let _ = write!(out, "{:<10}", method.label());
            for &alpha in &self.config.alphas {
                if let Some(r) = self.get(method, alpha) {
                    let _ = write!(
                        out,
                        " | {:<15} {:<15}",
                        cell(r.size_mean, r.size_std),
                        cell(r.coverage_mean, r.coverage_std)
                    );
                }
            }
            let _ = writeln!(out);
        }
        out
    }
}
