use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use cptk_core::conformal::{calibrate_with_policy, naive_threshold, tune_raps, RapsGrid};
use cptk_core::cpsn::{conformalize_with_policy, train_phase};
use cptk_core::dataio::{load_dataset, read_manifest, split, write_dataset};
use cptk_core::eval::{generate_synthetic, SplitSpec};
use cptk_core::seed::derive_seed;
use cptk_core::{
    apply_temperature, prepare_split, run_experiment, CalibratedThreshold, CpsnConformalizer,
    DataSource, Dataset, Error, ExperimentConfig, Method, PredictionSet, ProbabilityVector,
    RapsParams, SyntheticConfig, SyntheticTask, TrainConfig,
};
use log::info;
use serde_json::{json, Value};

use crate::{
    resolve, triple, CalibrateArgs, EvalArgs, Failure, InspectArgs, PredictArgs, SynthArgs,
    TrainCpsnArgs,
};

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes to stdout; a closed pipe (`cptk ... | head`) is not an error.
fn emit(text: &str) -> CmdResult {
    let mut w = BufWriter::new(io::stdout().lock());
    match w.write_all(text.as_bytes()).and_then(|_| w.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            Err(io_failure(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_failure(p, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Synthetic config for `synth`; `n` rows are drawn with the same seed.
pub fn synth_config(a: &SynthArgs) -> SyntheticConfig {
    SyntheticConfig {
        k: a.k as usize,
        d: a.d as usize,
        separation: a.separation,
        heteroscedastic: a.heteroscedastic,
        tau_range: (a.tau_min, a.tau_max),
        distortion: a.distortion,
        identical: a.identical,
        seed: a.seed,
    }
}

pub fn synth(a: &SynthArgs, out_dir: Option<&Path>) -> CmdResult {
    let task = SyntheticTask::new(synth_config(a))?;
    let data = generate_synthetic(&task, a.n as usize, a.seed)?;
    let dir = resolve(out_dir, &a.out);
    let manifest = write_dataset(&dir, &data.to_dataset("synthetic")?)?;
    emit(&format!("{}\n", manifest.display()))
}

pub fn calibrate(a: &CalibrateArgs, out_dir: Option<&Path>) -> CmdResult {
    if a.method == Method::Cpsn {
        return Err(Failure::usage("CPSN is fitted with `cptk train-cpsn`"));
    }
    let ds = load_dataset(&a.dataset)?;
    let prep = prepare_split(
        &ds,
        a.split.fractions()?,
        a.split.seed,
        !a.split.no_temperature,
    )?;
    let policy = a.policy.policy();
    let mut threshold = if a.method == Method::Naive {
        naive_threshold(a.alpha)?
    } else {
        let raps = match (a.method.uses_raps(), a.raps_a, a.raps_b) {
            (false, _, _) => None,
            (true, Some(pa), Some(pb)) => Some(RapsParams::new(pa, pb)?),
            (true, _, _) => {
                let rows = &prep.train[..prep.train.len().min(a.raps_tune_max)];
                let params = tune_raps(rows, a.alpha, &RapsGrid::default_for(ds.k()), policy)?;
                info!("tuned RAPS a = {}, b = {}", params.a, params.b);
                Some(params)
            }
        };
        calibrate_with_policy(&prep.val, a.alpha, a.method, raps, a.split.seed, policy)?
    };
    threshold.temperature = prep.temperature;
    let path = resolve(out_dir, &a.out);
    write_text(&path, &threshold.to_json()?)?;
    emit(&format!(
        "{}: q = {} (n_cal = {})\n",
        path.display(),
        threshold.q,
        threshold.n_cal
    ))
}

/// Regressor settings for `train-cpsn`, seeded from the global seed.
pub fn cpsn_train_config(base: TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, "cpsn", 0),
        ..base
    }
}

pub fn train_cpsn(a: &TrainCpsnArgs, out_dir: Option<&Path>) -> CmdResult {
    let ds = load_dataset(&a.dataset)?;
    let prep = prepare_split(
        &ds,
        a.split.fractions()?,
        a.split.seed,
        !a.split.no_temperature,
    )?;
    let config = cpsn_train_config(a.train.config(), a.split.seed);
    let run = train_phase(&prep.train, &config)?;
    if let Some(loss) = run.epoch_losses.last() {
        info!("final training loss {loss:.6}");
    }
    let mut c = conformalize_with_policy(run.model, config, &prep.val, a.alpha, a.policy.policy())?;
    c.temperature = prep.temperature;
    let path = resolve(out_dir, &a.out);
    create_parent(&path)?;
    c.save(&path)?;
    emit(&format!(
        "{}: delta1 = {} (n1 = {}), delta2 = {} (n2 = {})\n",
        path.display(),
        c.delta1,
        c.n1,
        c.delta2,
        c.n2
    ))
}

/// A loaded predictor of either kind.
pub enum Predictor {
    Threshold(CalibratedThreshold),
    Cpsn(CpsnConformalizer),
}

impl Predictor {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(Error::from)?;
        if value.get("method").and_then(Value::as_str) == Some(Method::Cpsn.name()) {
            Ok(Self::Cpsn(CpsnConformalizer::load(path)?))
        } else {
            Ok(Self::Threshold(CalibratedThreshold::from_json(&text)?))
        }
    }

    pub fn temperature(&self) -> Option<f64> {
        match self {
            Self::Threshold(t) => t.temperature,
            Self::Cpsn(c) => c.temperature,
        }
    }

    /// `ordinal` keys the uniform draw of randomized thresholds.
    pub fn predict(
        &self,
        features: &[f64],
        p: &ProbabilityVector,
        ordinal: u64,
    ) -> cptk_core::Result<PredictionSet> {
        match self {
            Self::Threshold(t) => t.predict_set(p, ordinal),
            Self::Cpsn(c) => c.predict(features, p),
        }
    }
}

/// Rows `predict` emits for a dataset, in output order.
pub fn predict_rows(
    ds: &Dataset,
    test_only: bool,
    fractions: [f64; 3],
    seed: u64,
) -> cptk_core::Result<Vec<usize>> {
    if test_only {
        Ok(split(ds.n(), fractions, derive_seed(seed, "split", 0))?.test)
    } else {
        Ok((0..ds.n()).collect())
    }
}

fn set_line(
    row: Option<usize>,
    set: &PredictionSet,
    names: Option<&[String]>,
    label: Option<u32>,
) -> Value {
    let mut line = json!({ "set": set.classes, "threshold": set.threshold_used });
    if let Some(r) = row {
        line["row"] = json!(r);
    }
    if let Some(names) = names {
        line["classes"] = json!(set
            .classes
            .iter()
            .map(|&c| names[c].as_str())
            .collect::<Vec<_>>());
    }
    if let Some(y) = label {
        line["label"] = json!(y);
    }
    line
}

pub fn predict(a: &PredictArgs, out_dir: Option<&Path>) -> CmdResult {
    let predictor = Predictor::load(&a.artifact)?;
    let mut lines = Vec::new();
    if let Some(dir) = &a.dataset {
        let ds = load_dataset(dir)?;
        let t = predictor.temperature();
        let rows = predict_rows(&ds, a.test_only, a.split.fractions()?, a.split.seed)?;
        for (ordinal, &i) in rows.iter().enumerate() {
            let p = ds.probabilities(i, t)?;
            let set = predictor.predict(&ds.features.row_f64(i), &p, ordinal as u64)?;
            lines.push(set_line(
                Some(i),
                &set,
                ds.class_names.as_deref(),
                Some(ds.labels[i]),
            ));
        }
    } else if let Some(scores) = &a.scores {
        let p = if a.logits {
            apply_temperature(scores, predictor.temperature().unwrap_or(1.0))?
        } else {
            ProbabilityVector::new(scores.clone())?
        };
        let features = match (&predictor, &a.features) {
            (_, Some(f)) => f.clone(),
            (Predictor::Cpsn(_), None) => {
                return Err(Failure::usage("CPSN needs --features for a single row"))
            }
            (Predictor::Threshold(_), None) => Vec::new(),
        };
        let set = predictor.predict(&features, &p, 0)?;
        lines.push(set_line(None, &set, None, None));
    }

    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match &a.out {
        Some(path) => write_text(&resolve(out_dir, path), &text),
        None => emit(&text),
    }
}

/// Experiment settings for `eval`.
pub fn eval_config(a: &EvalArgs) -> Result<ExperimentConfig, Failure> {
    let split = match &a.counts {
        Some(c) => {
            let [train, val, test] = triple("--counts", c)?;
            SplitSpec::Counts { train, val, test }
        }
        None => {
            if a.dataset.is_none() && a.n.is_none() {
                return Err(Failure::usage("synthetic eval needs --n or --counts"));
            }
            SplitSpec::Fractions {
                fractions: triple("--split", &a.split)?,
                n: a.n,
            }
        }
    };
    Ok(ExperimentConfig {
        methods: a.methods.clone(),
        alphas: a.alphas.clone(),
        trials: a.trials,
        seed: a.seed,
        split,
        raps_grid: None,
        raps_tune_max: a.raps_tune_max,
        cpsn: a.train.config(),
        set_policy: a.policy.policy(),
        temperature_scaling: !a.no_temperature,
    })
}

/// Synthetic task used by `eval` without a dataset.
pub fn eval_task(a: &EvalArgs) -> cptk_core::Result<SyntheticTask> {
    SyntheticTask::new(SyntheticConfig {
        k: a.synth.k as usize,
        d: a.synth.d as usize,
        separation: a.synth.separation,
        heteroscedastic: !a.synth.homoscedastic,
        distortion: a.synth.distortion,
        seed: a.synth.task_seed,
        ..SyntheticConfig::default()
    })
}

pub fn eval(a: &EvalArgs, out_dir: Option<&Path>) -> CmdResult {
    let config = eval_config(a)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = a.workers {
            if w == 0 {
                return Err(Failure::usage("--workers must be at least 1"));
            }
            b = b.num_threads(w);
        }
        b.build()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?
    };
    let report = match &a.dataset {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            pool.install(|| run_experiment(DataSource::Dataset(&ds), &ds.name, &config))?
        }
        None => {
            let task = eval_task(a)?;
            pool.install(|| run_experiment(DataSource::Synthetic(&task), "synthetic", &config))?
        }
    };
    emit(&report.table())?;
    if let Some(path) = &a.json {
        let path: PathBuf = resolve(out_dir, path);
        write_text(&path, &report.to_json()?)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> CmdResult {
    let mut out = String::new();
    if a.path.is_dir() {
        let m = read_manifest(&a.path)?;
        let ds = load_dataset(&a.path)?;
        let mut counts = vec![0usize; ds.k()];
        for &y in &ds.labels {
            counts[y as usize] += 1;
        }
        writeln!(out, "dataset      {}", m.name).unwrap();
        writeln!(out, "rows         {}", ds.n()).unwrap();
        writeln!(out, "classes      {}", ds.k()).unwrap();
        writeln!(out, "features     {}", ds.d()).unwrap();
        writeln!(out, "scores       {:?}", ds.kind).unwrap();
        match ds.temperature {
            Some(t) => writeln!(out, "temperature  {t}").unwrap(),
            None => writeln!(out, "temperature  (none)").unwrap(),
        }
        if let Some(names) = &ds.class_names {
            writeln!(out, "class names  {}", names.join(", ")).unwrap();
        }
        writeln!(out, "label counts {counts:?}").unwrap();
        writeln!(out, "checksums    ok").unwrap();
        return emit(&out);
    }
    match Predictor::load(&a.path)? {
        Predictor::Threshold(t) => {
            writeln!(out, "method       {}", t.method).unwrap();
            writeln!(out, "alpha        {}", t.alpha).unwrap();
            writeln!(out, "q            {}", t.q).unwrap();
            writeln!(out, "n_cal        {}", t.n_cal).unwrap();
            writeln!(out, "classes      {}", t.k).unwrap();
            if let Some(r) = t.raps {
                writeln!(out, "raps         a = {}, b = {}", r.a, r.b).unwrap();
            }
            writeln!(out, "set policy   {:?}", t.set_policy).unwrap();
            writeln!(out, "temperature  {:?}", t.temperature).unwrap();
        }
        Predictor::Cpsn(c) => {
            writeln!(out, "method       cpsn").unwrap();
            writeln!(out, "alpha        {}", c.alpha).unwrap();
            writeln!(out, "delta1       {} (n1 = {})", c.delta1, c.n1).unwrap();
            writeln!(out, "delta2       {} (n2 = {})", c.delta2, c.n2).unwrap();
            writeln!(out, "classes      {}", c.k).unwrap();
            writeln!(out, "features     {}", c.model.input_dim()).unwrap();
            writeln!(out, "hidden       {}", c.model.hidden_width()).unwrap();
            writeln!(out, "set policy   {:?}", c.set_policy).unwrap();
            writeln!(out, "temperature  {:?}", c.temperature).unwrap();
        }
    }
    emit(&out)
}
