//! CPSN: a learned per-example threshold made valid by conformalization.
//!
//! 1. Train a regressor `q(x)` on the APS score of the true label.
//! 2. On held-out data compute residuals `r = s(x, y) - q(x)` and split them
//!    by confidence: group 1 when `max p > 1 - alpha`, group 2 otherwise.
//!    Each group gets its own conformal quantile `delta_i`.
//! 3. At test time report the classes whose score is at most
//!    `q(x) + delta(x)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_quantile, Method};
use crate::error::{check_alpha, Error, Result};
use crate::eval::{avg_size, coverage, EvalReport, TrialRecord};
use crate::example::{check_split, LabeledExample};
use crate::regressor::{self, RegressorModel, TrainConfig, TrainingRun};
use crate::score::ScoreFamily;
use crate::set::{mass_reaching, score_at_most, PredictionSet, SetPolicy, SetRule};
use crate::simplex::ProbabilityVector;

pub const ARTIFACT_VERSION: u32 = 1;
/// Version of the confidence-group rule (`max p > 1 - alpha` is group 1).
pub const GROUP_RULE_VERSION: u32 = 1;

/// True when `p` belongs to the confident group. The boundary
/// `max p == 1 - alpha` belongs to the other group.
pub fn is_confident(p: &ProbabilityVector, alpha: f64) -> bool {
    p.max() > 1.0 - alpha
}

/// Mean and standard deviation of one residual group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl GroupStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            n,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub confident: GroupStats,
    pub uncertain: GroupStats,
}

/// A trained regressor plus its conformal corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct CpsnConformalizer {
    pub model: RegressorModel,
    pub train_config: TrainConfig,
    pub alpha: f64,
    /// Correction for the confident group (`+inf` means full sets).
    pub delta1: f64,
    /// Correction for the remaining examples.
    pub delta2: f64,
    pub n1: usize,
    pub n2: usize,
    /// Quantile over all residuals; used for a group with no examples.
    pub pooled_delta: f64,
    pub k: usize,
    pub set_policy: SetPolicy,
    pub residuals: ResidualSummary,
    /// Softmax temperature the probabilities were computed at.
    pub temperature: Option<f64>,
}

/// Training phase: fit the regressor to deterministic APS scores.
pub fn train_phase(train: &[LabeledExample], config: &TrainConfig) -> Result<TrainingRun> {
    check_split(train, "training split")?;
    let targets = aps_targets(train)?;
    let features: Vec<&[f64]> = train.iter().map(|e| e.features.as_slice()).collect();
    regressor::train(&features, &targets, config)
}

fn aps_targets(examples: &[LabeledExample]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| {
            let ranked = e.probs.rank();
            Ok(ScoreFamily::Aps.rank_score(&ranked, ranked.position(e.label)?))
        })
        .collect()
}

/// Conformalization phase with the default set policy.
pub fn conformalize_phase(
    model: RegressorModel,
    train_config: TrainConfig,
    val: &[LabeledExample],
    alpha: f64,
) -> Result<CpsnConformalizer> {
    conformalize_with_policy(model, train_config, val, alpha, SetPolicy::default())
}

pub fn conformalize_with_policy(
    model: RegressorModel,
    train_config: TrainConfig,
    val: &[LabeledExample],
    alpha: f64,
    set_policy: SetPolicy,
) -> Result<CpsnConformalizer> {
    let alpha = check_alpha(alpha)?;
    let (k, d) = check_split(val, "conformalization split")?;
    if d != model.input_dim() {
        return Err(Error::Shape {
            context: "feature dimension of conformalization split vs regressor",
            expected: model.input_dim(),
            found: d,
        });
    }
    let scores = aps_targets(val)?;
    let mut confident = Vec::new();
    let mut uncertain = Vec::new();
    let mut all = Vec::with_capacity(val.len());
    for (ex, s) in val.iter().zip(scores) {
        let r = s - model.forward(&ex.features)?;
        all.push(r);
        if is_confident(&ex.probs, alpha) {
            confident.push(r);
        } else {
            uncertain.push(r);
        }
    }
    let pooled_delta = conformal_quantile(&all, alpha)?;
    let group_delta = |g: &[f64]| {
        if g.is_empty() {
            Ok(pooled_delta)
        } else {
            conformal_quantile(g, alpha)
        }
    };
    let delta1 = group_delta(&confident)?;
    let delta2 = group_delta(&uncertain)?;
    let residuals = ResidualSummary {
        confident: GroupStats::of(&confident),
        uncertain: GroupStats::of(&uncertain),
    };
    log::info!(
        "cpsn alpha={alpha}: delta1={delta1:.4} (n1={}, residual {:.4} +/- {:.4}), \
         delta2={delta2:.4} (n2={}, residual {:.4} +/- {:.4})",
        confident.len(),
        residuals.confident.mean,
        residuals.confident.std,
        uncertain.len(),
        residuals.uncertain.mean,
        residuals.uncertain.std,
    );
    Ok(CpsnConformalizer {
        model,
        train_config,
        alpha,
        delta1,
        delta2,
        n1: confident.len(),
        n2: uncertain.len(),
        pooled_delta,
        k,
        set_policy,
        residuals,
        temperature: None,
    })
}

impl CpsnConformalizer {
    /// `delta(x)` for probabilities `p`.
    pub fn delta_for(&self, p: &ProbabilityVector) -> f64 {
        if is_confident(p, self.alpha) {
            self.delta1
        } else {
            self.delta2
        }
    }

    /// Unclamped per-example threshold `q(x) + delta(x)`.
    pub fn threshold(&self, features: &[f64], p: &ProbabilityVector) -> Result<f64> {
        Ok(self.model.forward(features)? + self.delta_for(p))
    }

    pub fn predict(&self, features: &[f64], p: &ProbabilityVector) -> Result<PredictionSet> {
        if p.k() != self.k {
            return Err(Error::Shape {
                context: "class count of conformalizer vs probabilities",
                expected: self.k,
                found: p.k(),
            });
        }
        let v = self.threshold(features, p)?;
        let ranked = p.rank();
        Ok(match self.set_policy.rule {
            SetRule::ScoreAtMost => {
                score_at_most(&ranked, ScoreFamily::Aps, v, None, self.set_policy.nonempty)
            }
            SetRule::MassReaching => mass_reaching(&ranked, v),
        })
    }

    fn header(&self, model_file: String) -> ArtifactHeader {
        ArtifactHeader {
            version: ARTIFACT_VERSION,
            method: Method::Cpsn,
            group_rule_version: GROUP_RULE_VERSION,
            alpha: self.alpha,
            delta1: self.delta1,
            delta2: self.delta2,
            n1: self.n1,
            n2: self.n2,
            pooled_delta: self.pooled_delta,
            k: self.k,
            d: self.model.input_dim(),
            set_policy: self.set_policy,
            residuals: self.residuals,
            temperature: self.temperature,
            model_file,
        }
    }

    /// Writes the JSON artifact at `path` and the model blob (plus its
    /// config sidecar) next to it as `<stem>.mlp`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = model_path(path);
        self.model.save(&blob, &self.train_config)?;
        let name = blob
            .file_name()
            .expect("model path has a file name")
            .to_string_lossy()
            .into_owned();
        let json = serde_json::to_string_pretty(&self.header(name))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: ArtifactHeader = serde_json::from_str(&text)?;
        if h.version != ARTIFACT_VERSION || h.group_rule_version != GROUP_RULE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: if h.version != ARTIFACT_VERSION {
                    h.version
                } else {
                    h.group_rule_version
                },
                supported: ARTIFACT_VERSION,
            });
        }
        if h.method != Method::Cpsn {
            return Err(Error::invalid(
                "method",
                format!("{} artifact is not a CPSN conformalizer", h.method),
            ));
        }
        check_alpha(h.alpha)?;
        let blob = path.parent().unwrap_or(Path::new(".")).join(&h.model_file);
        let (model, train_config) = RegressorModel::load(&blob)?;
        if model.input_dim() != h.d {
            return Err(Error::Dimension {
                path: blob,
                reason: format!(
                    "model input is {}, artifact says {}",
                    model.input_dim(),
                    h.d
                ),
            });
        }
        Ok(Self {
            model,
            train_config,
            alpha: h.alpha,
            delta1: h.delta1,
            delta2: h.delta2,
            n1: h.n1,
            n2: h.n2,
            pooled_delta: h.pooled_delta,
            k: h.k,
            set_policy: h.set_policy,
            residuals: h.residuals,
            temperature: h.temperature,
        })
    }
}

/// `out/cpsn.json` -> `out/cpsn.mlp`.
pub fn model_path(artifact: &Path) -> PathBuf {
    artifact.with_extension("mlp")
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    version: u32,
    method: Method,
    group_rule_version: u32,
    alpha: f64,
    #[serde(with = "crate::json::extended_f64")]
    delta1: f64,
    #[serde(with = "crate::json::extended_f64")]
    delta2: f64,
    n1: usize,
    n2: usize,
    #[serde(with = "crate::json::extended_f64")]
    pooled_delta: f64,
    k: usize,
    d: usize,
    set_policy: SetPolicy,
    residuals: ResidualSummary,
    #[serde(default)]
    temperature: Option<f64>,
    model_file: String,
}

/// Runs all three phases and evaluates on `test`.
pub fn run_pipeline(
    train: &[LabeledExample],
    val: &[LabeledExample],
    test: &[LabeledExample],
    alpha: f64,
    config: &TrainConfig,
) -> Result<(CpsnConformalizer, EvalReport)> {
    check_split(test, "test split")?;
    let run = train_phase(train, config)?;
    let cpsn = conformalize_phase(run.model, config.clone(), val, alpha)?;
    let sets = test
        .iter()
        .map(|e| cpsn.predict(&e.features, &e.probs))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let record = TrialRecord {
        trial: 0,
        seed: config.seed,
        coverage: coverage(&sets, &labels)?,
        size: avg_size(&sets)?,
        q: None,
        raps: None,
        temperature: None,
        delta1: Some(cpsn.delta1),
        delta2: Some(cpsn.delta2),
        residuals: Some(cpsn.residuals),
    };
    let report = EvalReport::from_trials(Method::Cpsn, alpha, val.len(), test.len(), vec![record]);
    Ok((cpsn, report))
}
