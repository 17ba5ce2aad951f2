//! Masked-language-inference training loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ast::ValueType;
use crate::dataset::{Example, MaskSchedule, MaskedInstance};
use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::model::{self, ModelError, ModelParams};
use crate::nn::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule};
use crate::nn::tape::{Tape, Var};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub mlm_enabled: bool,
    pub seed: u64,
    /// `total_steps = 0` spans the whole run.
    pub schedule: MaskSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            batch_size: 16,
            lr: 4e-3,
            epochs: 30,
            warmup_steps: 5000,
            clip_norm: 1.0,
            mlm_enabled: true,
            seed: 0,
            schedule: MaskSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0) || self.batch_size == 0 || !(self.lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "alpha {} lr {} clip_norm {} batch_size {}",
                self.alpha, self.lr, self.clip_norm, self.batch_size
            )));
        }
        self.schedule.check().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training split")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Both loss terms for a batch. `loss = mlm_loss + alpha * inf_loss`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    pub loss: f64,
    /// Mean masked-token cross-entropy (0 when disabled or nothing is masked).
    pub mlm_loss: f64,
    /// Mean negative log q over masked assignments.
    pub inf_loss: f64,
    pub n_mlm: usize,
    pub n_inf: usize,
}

struct Parts {
    root: Var,
    mlm_sum: f64,
    inf_sum: f64,
}

fn instance_loss<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, inst: &MaskedInstance, w_mlm: f64, w_inf: f64) -> Result<Parts, ModelError> {
    let mut terms = Vec::new();
    let mut inf_sum = 0.0;
    if !inst.inf_targets.is_empty() {
        let enc = model::encode(tape, params, &inst.inf_tokens)?;
        for vt in [ValueType::Continuous, ValueType::Binary] {
            let (pos, vals): (Vec<usize>, Vec<T>) = inst.inf_targets.iter().filter(|t| t.value_type == vt).map(|t| (t.pos, T::of(t.value))).unzip();
            if pos.is_empty() {
                continue;
            }
            let nll = match vt {
                ValueType::Continuous => {
                    let pred = model::continuous_head(tape, params, &enc, &pos)?;
                    tape.gaussian_nll_sum(pred, &vals, T::one())
                }
                ValueType::Binary => {
                    let logit = model::binary_head(tape, params, &enc, &pos)?;
                    tape.bernoulli_nll_sum(logit, &vals, T::one())
                }
            };
            inf_sum += tape.scalar(nll).as_f64();
            terms.push(tape.scale(nll, T::of(w_inf)));
        }
    }
    let mut mlm_sum = 0.0;
    if w_mlm > 0.0 && !inst.mlm_targets.is_empty() {
        let enc = model::encode(tape, params, &inst.mlm_tokens)?;
        let (pos, ids): (Vec<usize>, Vec<usize>) = inst.mlm_targets.iter().map(|&(p, id)| (p, id as usize)).unzip();
        let logits = model::mlm_logits(tape, params, &enc, &pos)?;
        let ce = tape.cross_entropy_sum(logits, &ids, T::one());
        mlm_sum = tape.scalar(ce).as_f64();
        terms.push(tape.scale(ce, T::of(w_mlm)));
    }
    Ok(Parts {
        root: tape.sum(&terms),
        mlm_sum,
        inf_sum,
    })
}

fn batch_weights(batch: &[MaskedInstance], config: &TrainConfig) -> (usize, usize, f64, f64) {
    let n_inf: usize = batch.iter().map(|b| b.inf_targets.len()).sum();
    let n_mlm: usize = if config.mlm_enabled { batch.iter().map(|b| b.mlm_targets.len()).sum() } else { 0 };
    let w_mlm = if n_mlm > 0 { 1.0 / n_mlm as f64 } else { 0.0 };
    let w_inf = if n_inf > 0 { config.alpha / n_inf as f64 } else { 0.0 };
    (n_mlm, n_inf, w_mlm, w_inf)
}

fn metrics(n_mlm: usize, n_inf: usize, mlm_sum: f64, inf_sum: f64, alpha: f64) -> LossMetrics {
    let mlm_loss = if n_mlm > 0 { mlm_sum / n_mlm as f64 } else { 0.0 };
    let inf_loss = if n_inf > 0 { inf_sum / n_inf as f64 } else { 0.0 };
    LossMetrics {
        loss: mlm_loss + alpha * inf_loss,
        mlm_loss,
        inf_loss,
        n_mlm,
        n_inf,
    }
}

/// Batch loss and its exact gradient. Per-instance gradients are computed in
/// parallel and summed in batch order.
pub fn mli_loss<T: Scalar>(params: &ModelParams<T>, batch: &[MaskedInstance], config: &TrainConfig) -> Result<(LossMetrics, Vec<Array2<T>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (n_mlm, n_inf, w_mlm, w_inf) = batch_weights(batch, config);
    let per: Vec<Result<(f64, f64, Vec<Array2<T>>), ModelError>> = batch
        .par_iter()
        .map(|inst| {
            let mut tape = Tape::new(&params.tensors);
            let parts = instance_loss(&mut tape, params, inst, w_mlm, w_inf)?;
            let mut g = params.zeros_like();
            tape.backward(parts.root, &mut g);
            Ok((parts.mlm_sum, parts.inf_sum, g))
        })
        .collect();
    let mut grads = params.zeros_like();
    let (mut mlm_sum, mut inf_sum) = (0.0, 0.0);
    for r in per {
        let (m, i, g) = r?;
        mlm_sum += m;
        inf_sum += i;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let m = metrics(n_mlm, n_inf, mlm_sum, inf_sum, config.alpha);
    if !m.loss.is_finite() {
        return Err(TrainError::Model(ModelError::NonFiniteLoss));
    }
    Ok((m, grads))
}

/// Forward-only version of [`mli_loss`].
pub fn mli_loss_value<T: Scalar>(params: &ModelParams<T>, batch: &[MaskedInstance], config: &TrainConfig) -> Result<LossMetrics, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (n_mlm, n_inf, w_mlm, w_inf) = batch_weights(batch, config);
    let per: Vec<Result<(f64, f64), ModelError>> = batch
        .par_iter()
        .map(|inst| {
            let mut tape = Tape::new(&params.tensors);
            let parts = instance_loss(&mut tape, params, inst, w_mlm, w_inf)?;
            Ok((parts.mlm_sum, parts.inf_sum))
        })
        .collect();
    let (mut mlm_sum, mut inf_sum) = (0.0, 0.0);
    for r in per {
        let (m, i) = r?;
        mlm_sum += m;
        inf_sum += i;
    }
    Ok(metrics(n_mlm, n_inf, mlm_sum, inf_sum, config.alpha))
}

/// Mean loss over the stored masks of `examples`.
pub fn dev_loss<T: Scalar>(params: &ModelParams<T>, examples: &[Example], config: &TrainConfig) -> Result<LossMetrics, TrainError> {
    let insts: Vec<MaskedInstance> = examples.iter().map(|e| e.stored(config.schedule.mlm_rate)).collect();
    if insts.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    mli_loss_value(params, &insts, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub mlm_loss: f64,
    pub inf_loss: f64,
    pub lr: f64,
    pub mask_rate: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub dev_loss: f64,
    pub dev_inf_loss: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub best: ModelParams<T>,
    pub last: ModelParams<T>,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub final_dev: f64,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Where [`train`] writes checkpoints and logs.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.to_path_buf(), source };
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

/// Trains from `init`. Instances are re-masked every epoch; the dev split is
/// scored with its stored masks after each epoch.
pub fn train<T: Scalar>(init: ModelParams<T>, train: &[Example], dev: &[Example], config: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainOutcome<T>, TrainError> {
    config.check()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let start = Instant::now();
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as u64;
    let mut schedule = config.schedule;
    if schedule.total_steps == 0 {
        schedule.total_steps = total_steps;
    }
    let lr_sched = LrSchedule {
        peak: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps,
    };
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|source| TrainError::Io { path: o.dir.clone(), source })?;
        let _ = fs::remove_file(o.log());
    }
    let mut params = init;
    let mut state = AdamState::new(&params.shapes(), AdamConfig::default());
    let dev_set = if dev.is_empty() { &train[..train.len().min(64)] } else { dev };
    let mut best = params.clone();
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0;
    let mut final_dev = f64::INFINITY;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<MaskedInstance> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut r = rng::stream(config.seed, "remask", step * config.batch_size as u64 + j as u64);
                    train[i].remask(&schedule, step, &mut r)
                })
                .collect();
            let (m, mut grads) = match mli_loss(&params, &batch, config) {
                Ok(x) => x,
                Err(TrainError::Model(ModelError::NonFiniteLoss | ModelError::NonFinite { .. })) => return Err(TrainError::NonFinite { step }),
                Err(e) => return Err(e),
            };
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            let lr = lr_sched.lr(step);
            adam_step(&mut params.tensors, &grads, &mut state, lr);
            let rec = LogRecord {
                step,
                epoch,
                loss: m.loss,
                mlm_loss: m.mlm_loss,
                inf_loss: m.inf_loss,
                lr,
                mask_rate: schedule.inf_rate(step),
                grad_norm,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some(o) = out {
                append_line(&o.log(), &serde_json::to_string(&rec).expect("record serializes"))?;
            }
            log.push(rec);
            step += 1;
        }
        let d = dev_loss(&params, dev_set, config)?;
        final_dev = d.loss;
        epochs.push(EpochRecord {
            epoch,
            step,
            dev_loss: d.loss,
            dev_inf_loss: d.inf_loss,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if d.loss < best_dev {
            best_dev = d.loss;
            best_epoch = epoch;
            best = params.clone();
            if let Some(o) = out {
                checkpoint::save(&best, &o.best(), serde_json::json!({"epoch": epoch, "step": step, "dev_loss": d.loss}))?;
            }
        }
    }
    if config.epochs == 0 {
        let d = dev_loss(&params, dev_set, config)?;
        best_dev = d.loss;
        final_dev = d.loss;
        if let Some(o) = out {
            checkpoint::save(&best, &o.best(), serde_json::json!({"epoch": 0, "step": 0, "dev_loss": d.loss}))?;
        }
    }
    if let Some(o) = out {
        checkpoint::save(&params, &o.last(), serde_json::json!({"epoch": config.epochs, "step": step, "dev_loss": final_dev}))?;
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        best_dev,
        final_dev,
        log,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_instance;
    use crate::nn::model::ModelConfig;
    use crate::programs;

    fn tiny() -> ModelParams<f64> {
        ModelParams::init(
            &ModelConfig {
                d_model: 8,
                layers: 1,
                heads: 2,
                ff_mult: 2,
                max_len: 128,
            },
            5,
        )
        .unwrap()
    }

    fn batch() -> Vec<MaskedInstance> {
        (0..3).map(|s| make_instance(&programs::latent(), &MaskSchedule::default(), 0, s, None).unwrap()).collect()
    }

    #[test]
    fn decomposition_and_ablation() {
        let p = tiny();
        let b = batch();
        let cfg = TrainConfig::default();
        let (m, _) = mli_loss(&p, &b, &cfg).unwrap();
        assert!((m.loss - (m.mlm_loss + 0.1 * m.inf_loss)).abs() < 1e-9);
        let no_mlm = TrainConfig { mlm_enabled: false, ..cfg.clone() };
        let (m2, _) = mli_loss(&p, &b, &no_mlm).unwrap();
        assert_eq!(m2.mlm_loss, 0.0);
        assert!((m2.loss - 0.1 * m.inf_loss).abs() < 1e-12);
        let alpha0 = TrainConfig { alpha: 0.0, ..cfg };
        let (m3, _) = mli_loss(&p, &b, &alpha0).unwrap();
        assert!((m3.loss - m.mlm_loss).abs() < 1e-12);
    }

    #[test]
    fn untrained_head_is_standard_normal() {
        let p = tiny();
        let b = batch();
        let (m, _) = mli_loss(&p, &b, &TrainConfig::default()).unwrap();
        // every target here is continuous; zero head gives N(0, 1)
        let targets: Vec<f64> = b.iter().flat_map(|i| i.inf_targets.iter().map(|t| t.value)).collect();
        let oracle = targets.iter().map(|z| 0.5 * z * z + 0.5 * (2.0 * std::f64::consts::PI).ln()).sum::<f64>() / targets.len() as f64;
        assert!((m.inf_loss - oracle).abs() < 1e-9);
    }

    #[test]
    fn value_and_gradient_paths_agree() {
        let p = tiny();
        let b = batch();
        let cfg = TrainConfig::default();
        let (m, _) = mli_loss(&p, &b, &cfg).unwrap();
        let v = mli_loss_value(&p, &b, &cfg).unwrap();
        assert!((m.loss - v.loss).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(mli_loss(&tiny(), &[], &TrainConfig::default()), Err(TrainError::EmptyBatch)));
    }
}
