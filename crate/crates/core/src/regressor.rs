//! Two-layer ReLU network `q(x) = b2 + w2 . relu(W1^T x + b1)` trained with
//! mean squared error and AdamW.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

const MAGIC: &[u8; 8] = b"CPTKMLP1";

/// Optimizer and architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden_width: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-6,
            batch_size: 128,
            epochs: 100,
            hidden_width: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name, v: f64| {
            if v.is_finite() && v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("{v} must be in (0, 1)")))
            }
        };
        unit("learning_rate", self.learning_rate)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be finite and >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden_width", "must be >= 1"));
        }
        Ok(())
    }
}

/// Network parameters, stored flat as `[w1 (d x h, row-major), b1, w2, b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    d: usize,
    h: usize,
    params: Vec<f64>,
}

impl RegressorModel {
    /// All-zero network.
    pub fn zeros(d: usize, h: usize) -> Result<Self> {
        if d == 0 || h == 0 {
            return Err(Error::invalid("dimensions", "d and h must be >= 1"));
        }
        Ok(Self {
            d,
            h,
            params: vec![0.0; Self::param_count(d, h)],
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization per layer.
    pub fn init(d: usize, h: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(d, h)?;
        let mut rng = rng_for(seed, "regressor-init", 0);
        let (l1, l2) = (1.0 / (d as f64).sqrt(), 1.0 / (h as f64).sqrt());
        let split = d * h + h;
        for (i, p) in model.params.iter_mut().enumerate() {
            let bound = if i < split { l1 } else { l2 };
            *p = rng.gen_range(-bound..=bound);
        }
        Ok(model)
    }

    pub fn from_parts(w1: &[f64], b1: &[f64], w2: &[f64], b2: f64) -> Result<Self> {
        let h = b1.len();
        if h == 0 || w2.len() != h || w1.is_empty() || w1.len() % h != 0 {
            return Err(Error::invalid(
                "parts",
                format!(
                    "w1 {}, b1 {}, w2 {} do not form a d x h network",
                    w1.len(),
                    h,
                    w2.len()
                ),
            ));
        }
        let mut params = Vec::with_capacity(w1.len() + 2 * h + 1);
        params.extend_from_slice(w1);
        params.extend_from_slice(b1);
        params.extend_from_slice(w2);
        params.push(b2);
        Self::from_flat(w1.len() / h, h, params)
    }

    pub fn from_flat(d: usize, h: usize, params: Vec<f64>) -> Result<Self> {
        if d == 0 || h == 0 {
            return Err(Error::invalid("dimensions", "d and h must be >= 1"));
        }
        if params.len() != Self::param_count(d, h) {
            return Err(Error::Shape {
                context: "regressor parameter count",
                expected: Self::param_count(d, h),
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(
                "regressor parameters are not finite".into(),
            ));
        }
        Ok(Self { d, h, params })
    }

    pub fn param_count(d: usize, h: usize) -> usize {
        d * h + 2 * h + 1
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_width(&self) -> usize {
        self.h
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.d * self.h]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.d * self.h;
        &self.params[o..o + self.h]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.d * self.h + self.h;
        &self.params[o..o + self.h]
    }

    pub fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.d {
            Ok(())
        } else {
            Err(Error::Shape {
                context: "regressor input dimension",
                expected: self.d,
                found: x.len(),
            })
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut pre = vec![0.0; self.h];
        Ok(self.forward_into(x, &mut pre))
    }

    /// Forward pass that leaves the hidden pre-activations in `pre`.
    fn forward_into(&self, x: &[f64], pre: &mut [f64]) -> f64 {
        let (d, h) = (self.d, self.h);
        pre.copy_from_slice(&self.params[d * h..d * h + h]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &self.params[i * h..(i + 1) * h];
                for (p, w) in pre.iter_mut().zip(row) {
                    *p += xi * w;
                }
            }
        }
        let w2 = self.w2();
        let hidden: f64 = pre.iter().zip(w2).map(|(p, w)| p.max(0.0) * w).sum();
        self.b2() + hidden
    }

    /// Mean squared error over the batch and its gradient in flat layout.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[f64]) -> Result<(f64, Vec<f64>)> {
        if xs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if xs.len() != ys.len() {
            return Err(Error::Shape {
                context: "batch targets",
                expected: xs.len(),
                found: ys.len(),
            });
        }
        for x in xs {
            self.check_input(x)?;
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut pre = vec![0.0; self.h];
        let loss = self.accumulate(
            xs.iter().copied().zip(ys.iter().copied()),
            xs.len(),
            &mut grad,
            &mut pre,
        );
        Ok((loss, grad))
    }

    /// Adds the batch-mean gradient into `grad` and returns the batch loss.
    fn accumulate<'a>(
        &self,
        batch: impl Iterator<Item = (&'a [f64], f64)>,
        n: usize,
        grad: &mut [f64],
        pre: &mut [f64],
    ) -> f64 {
        let (d, h) = (self.d, self.h);
        let scale = 1.0 / n as f64;
        let (gw1, rest) = grad.split_at_mut(d * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        let w2 = &self.params[d * h + h..d * h + 2 * h];
        let mut loss = 0.0;
        for (x, y) in batch {
            let err = self.forward_into(x, pre) - y;
            loss += err * err;
            let g_out = 2.0 * err * scale;
            gb2[0] += g_out;
            for j in 0..h {
                if pre[j] > 0.0 {
                    gw2[j] += g_out * pre[j];
                    let g = g_out * w2[j];
                    pre[j] = g;
                    gb1[j] += g;
                } else {
                    pre[j] = 0.0;
                }
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let row = &mut gw1[i * h..(i + 1) * h];
                    for (g, p) in row.iter_mut().zip(pre.iter()) {
                        *g += xi * p;
                    }
                }
            }
        }
        loss * scale
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + 8 * Self::param_count(d, h);
        if bytes.len() != expected {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                reason: format!(
                    "d={d}, h={h} needs {expected} bytes, file has {}",
                    bytes.len()
                ),
            });
        }
        let params = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(d, h, params)
    }

    /// Writes the parameter blob and, next to it, the training config as JSON.
    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(config)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(sidecar, e))
    }

    /// Reads a blob written by [`save`](Self::save) and its config sidecar.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model = Self::from_bytes(&bytes, path)?;
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(sidecar, e))?;
        Ok((model, serde_json::from_str(&text)?))
    }
}

/// `model.bin` -> `model.bin.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// AdamW state: moment estimates and step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update: decay the weights by `1 - lr * wd`, then take the
    /// bias-corrected adaptive step.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        let decay = 1.0 - lr * cfg.weight_decay;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// A trained model and its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: RegressorModel,
    pub epoch_losses: Vec<f64>,
}

/// Fits the network to `(features, targets)` with shuffled mini-batches.
pub fn train<R: AsRef<[f64]>>(
    features: &[R],
    targets: &[f64],
    config: &TrainConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if features.len() != targets.len() {
        return Err(Error::Shape {
            context: "training targets",
            expected: features.len(),
            found: targets.len(),
        });
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::invalid(
            "targets",
            format!("target {i} is not finite"),
        ));
    }
    let d = features[0].as_ref().len();
    let mut model = RegressorModel::init(d, config.hidden_width, config.seed)?;
    for x in features {
        model.check_input(x.as_ref())?;
    }

    let n = features.len();
    let mut opt = AdamW::new(model.params.len());
    let mut grad = vec![0.0; model.params.len()];
    let mut pre = vec![0.0; model.h];
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, "regressor-shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let items = batch.iter().map(|&i| (features[i].as_ref(), targets[i]));
            let loss = model.accumulate(items, batch.len(), &mut grad, &mut pre);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became non-finite in epoch {epoch}; \
                     try a learning rate below {}",
                    config.learning_rate
                )));
            }
            total += loss * batch.len() as f64;
            opt.step(&mut model.params, &grad, config);
        }
        epoch_losses.push(total / n as f64);
        log::trace!("epoch {epoch}: loss {:.6}", total / n as f64);
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!(
            "regressor parameters diverged; try a learning rate below {}",
            config.learning_rate
        )));
    }
    Ok(TrainingRun {
        model,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_problem(
        d: usize,
        h: usize,
        n: usize,
        seed: u64,
    ) -> (RegressorModel, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = RegressorModel::init(d, h, seed).unwrap();
        for p in model.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let xs = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let ys = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        (model, xs, ys)
    }

    /// Independent loss evaluation straight from the definition.
    fn reference_loss(m: &RegressorModel, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let (d, h) = (m.input_dim(), m.hidden_width());
        let p = m.params();
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let mut out = p[p.len() - 1];
            for j in 0..h {
                let mut z = p[d * h + j];
                for i in 0..d {
                    z += x[i] * p[i * h + j];
                }
                out += p[d * h + h + j] * z.max(0.0);
            }
            total += (out - y).powi(2);
        }
        total / xs.len() as f64
    }

    #[test]
    fn forward_examples() {
        let m = RegressorModel::from_parts(&[0.0; 6], &[0.0; 3], &[0.0; 3], 0.3).unwrap();
        assert_eq!(m.forward(&[4.0, -1.0]).unwrap(), 0.3);
        let m = RegressorModel::from_parts(&[1.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(m.forward(&[-2.0]).unwrap(), 0.0);
        assert_eq!(m.forward(&[2.0]).unwrap(), 2.0);
        assert!(m.forward(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let m = RegressorModel::zeros(3, 2).unwrap();
        let (loss, grad) = m.loss_and_grad(&[&[1.0, 2.0, 3.0]], &[1.0]).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(*grad.last().unwrap(), -2.0);
        let m = RegressorModel::from_parts(&[1.0], &[0.0], &[1.0], 0.0).unwrap();
        let (loss, grad) = m.loss_and_grad(&[&[2.0], &[-1.0]], &[2.0, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert!(m.loss_and_grad(&[], &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for cfg in 0..20u64 {
            let (d, h, n) = (
                1 + cfg as usize % 5,
                1 + cfg as usize % 4 + 2,
                3 + cfg as usize % 6,
            );
            let (model, xs, ys) = random_problem(d, h, n, cfg);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let (loss, grad) = model.loss_and_grad(&refs, &ys).unwrap();
            assert!((loss - reference_loss(&model, &xs, &ys)).abs() < 1e-12);
            for (k, &g) in grad.iter().enumerate() {
                let mut plus = model.clone();
                plus.params_mut()[k] += 1e-5;
                let mut minus = model.clone();
                minus.params_mut()[k] -= 1e-5;
                let fd =
                    (reference_loss(&plus, &xs, &ys) - reference_loss(&minus, &xs, &ys)) / 2e-5;
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(rel < 1e-4, "config {cfg} param {k}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut params = vec![1.0, -2.0, 0.5];
        let mut opt = AdamW::new(3);
        opt.step(&mut params, &[0.0; 3], &cfg);
        let f = 1.0 - 1e-3 * 0.1;
        assert_eq!(params, vec![f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = vec![0.0, 0.0];
        let mut opt = AdamW::new(2);
        opt.step(&mut params, &[3.0, -0.5], &cfg);
        assert!((params[0] + 1e-2).abs() < 1e-9);
        assert!((params[1] - 1e-2).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let xs = vec![vec![1.0, 2.0]; 4];
        let cfg = TrainConfig {
            epochs: 0,
            hidden_width: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = train(&xs, &[0.5; 4], &cfg).unwrap();
        assert_eq!(run.model, RegressorModel::init(2, 8, 5).unwrap());
        assert!(run.epoch_losses.is_empty());
    }

    #[test]
    fn fits_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 200,
            epochs: 3000,
            hidden_width: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let run = train(&xs, &[0.7; 200], &cfg).unwrap();
        for x in &xs {
            let y = run.model.forward(x).unwrap();
            assert!((y - 0.7).abs() <= 0.01, "{y}");
        }
        for w in run.epoch_losses[5..].windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fits_a_teacher_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.3 + 0.5 * x[0] - 0.2 * x[1] + (x[0] + x[1]).max(0.0))
            .collect();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 32,
            epochs: 200,
            hidden_width: 16,
            seed: 2,
            ..TrainConfig::default()
        };
        let run = train(&xs, &ys, &cfg).unwrap();
        assert!(
            *run.epoch_losses.last().unwrap() <= 1e-3,
            "{:?}",
            run.epoch_losses.last()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (_, xs, ys) = random_problem(3, 4, 50, 11);
        let cfg = TrainConfig {
            epochs: 5,
            hidden_width: 8,
            batch_size: 7,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&xs, &ys, &cfg).unwrap().model;
        let b = train(&xs, &ys, &cfg).unwrap().model;
        assert!(a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn divergence_is_reported() {
        let xs = vec![vec![1e200, -1e200]; 8];
        let cfg = TrainConfig {
            epochs: 3,
            hidden_width: 4,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let err = train(&xs, &[1.0; 8], &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(err.to_string().contains("learning rate"));
    }

    #[test]
    fn blob_round_trip() {
        let (model, _, _) = random_problem(4, 3, 1, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let cfg = TrainConfig {
            seed: 77,
            ..TrainConfig::default()
        };
        model.save(&path, &cfg).unwrap();
        let (back, back_cfg) = RegressorModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_cfg, cfg);
        let mut bytes = model.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            RegressorModel::from_bytes(&bytes, &path),
            Err(Error::BadMagic { .. })
        ));
        let bytes = model.to_bytes();
        assert!(matches!(
            RegressorModel::from_bytes(&bytes[..bytes.len() - 8], &path),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            hidden_width: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
