//! Posterior queries against a trained model: zero-shot, autoregressive
//! decoding, SVI finetuning with plating, and products of experts.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ast::{infer_value_types, Program, Slot, ValueType};
use crate::exec::{self, is_log_zero, ExecError, PlateMinibatch, Trace, DEFAULT_SOFT_DELTA_STD};
use crate::nn::model::{self, ModelError, ModelParams, Posterior};
use crate::nn::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::nn::tape::{clamp_log_std, Tape};
use crate::nn::tokenizer::{self, TokenSeq, TokenizeError};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::text::{self, RenderError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferError {
    #[error("`{0}` is both observed and latent")]
    Overlap(Slot),
    #[error("`{0}` is neither observed nor latent")]
    Uncovered(Slot),
    #[error("`{0}` is not an assignment of the program")]
    UnknownLatent(Slot),
    #[error("latent `{0}` is binary; finetuning supports continuous latents only")]
    BinaryLatent(Slot),
    #[error("finetuning needs at least one latent sample statement per observation set")]
    NoSampledLatent,
    #[error("product of experts needs at least one expert")]
    NoExperts,
    #[error("product of experts needs Gaussian experts with positive std")]
    BadExpert,
    #[error("program has no plate")]
    NoPlate,
    #[error("observations do not include every plate member")]
    IncompletePlate,
    #[error("non-finite ELBO at step {step}")]
    NonFiniteElbo { step: usize },
    #[error("every reparameterized sample has zero joint density at step {step}")]
    ZeroDensity { step: usize },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "order", content = "seed")]
pub enum DecodeOrder {
    /// Latents in the order given.
    Given,
    /// A random permutation drawn from this seed.
    Random(u64),
}

/// A program with some slots observed and the rest to infer. The observed
/// trace's plate minibatch decides which members are rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceQuery {
    pub program: Program,
    pub observed: Trace,
    pub latents: Vec<Slot>,
}

impl InferenceQuery {
    pub fn new(program: Program, observed: Trace, latents: Vec<Slot>) -> Self {
        InferenceQuery { program, observed, latents }
    }

    /// Splits a full trace: `latents` are hidden, everything else observed.
    pub fn from_trace(program: &Program, trace: &Trace, latents: &[Slot]) -> Self {
        let hidden: BTreeSet<Slot> = latents.iter().cloned().collect();
        let mut observed = trace.mask(&hidden);
        observed.masked.clear();
        InferenceQuery {
            program: program.clone(),
            observed,
            latents: latents.to_vec(),
        }
    }

    pub fn check(&self) -> Result<(), InferError> {
        let slots: BTreeSet<Slot> = self.program.instances(self.observed.members()).into_iter().map(|(s, _)| s).collect();
        let latents: BTreeSet<&Slot> = self.latents.iter().collect();
        for l in &self.latents {
            if !slots.contains(l) {
                return Err(InferError::UnknownLatent(l.clone()));
            }
            if self.observed.values.contains_key(l) {
                return Err(InferError::Overlap(l.clone()));
            }
        }
        for s in &slots {
            if !latents.contains(s) && !self.observed.values.contains_key(s) {
                return Err(InferError::Uncovered(s.clone()));
            }
        }
        Ok(())
    }

    pub fn masks(&self) -> BTreeSet<Slot> {
        self.latents.iter().cloned().collect()
    }

    pub fn render(&self) -> Result<String, InferError> {
        Ok(text::render(&self.program, &self.observed, &self.masks())?)
    }

    fn value_types(&self) -> Vec<ValueType> {
        let typed = infer_value_types(&self.program);
        self.latents.iter().map(|l| typed.assign(&l.name).map(|a| a.value_type).unwrap_or_default()).collect()
    }

    /// Token sequence plus `(position, value type)` per latent, in latent order.
    pub fn encode_query(&self, max_len: usize) -> Result<(TokenSeq, Vec<(usize, ValueType)>), InferError> {
        self.check()?;
        let seq = tokenizer::tokenize_max(&self.render()?, max_len)?;
        let types = self.value_types();
        let queries = self
            .latents
            .iter()
            .zip(types)
            .map(|(l, vt)| {
                let pos = seq.line_of(l).and_then(|s| s.value_pos).ok_or_else(|| InferError::UnknownLatent(l.clone()))?;
                Ok((pos, vt))
            })
            .collect::<Result<Vec<_>, InferError>>()?;
        Ok((seq, queries))
    }
}

/// All latents unmasked at once from one encoder pass.
pub fn zero_shot<T: Scalar>(params: &ModelParams<T>, query: &InferenceQuery) -> Result<BTreeMap<Slot, Posterior>, InferError> {
    let (seq, queries) = query.encode_query(params.config.max_len)?;
    let post = model::posteriors(params, &seq, &queries)?;
    Ok(query.latents.iter().cloned().zip(post).collect())
}

/// Zero-shot posteriors in latent order.
pub fn zero_shot_list<T: Scalar>(params: &ModelParams<T>, query: &InferenceQuery) -> Result<Vec<Posterior>, InferError> {
    let (seq, queries) = query.encode_query(params.config.max_len)?;
    Ok(model::posteriors(params, &seq, &queries)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub posteriors: BTreeMap<Slot, Posterior>,
    /// Latents in the order they were unmasked.
    pub order: Vec<Slot>,
    pub trace: Trace,
    pub encoder_passes: usize,
}

/// Unmasks one latent per encoder pass, writing each decoded value back into
/// the text before the next pass. Values are posterior means (modes for
/// binaries) unless `sample` is set.
pub fn autoregressive_decode<T: Scalar>(params: &ModelParams<T>, query: &InferenceQuery, order: &DecodeOrder, sample: bool, seed: u64) -> Result<Decoded, InferError> {
    query.check()?;
    let mut queue = query.latents.clone();
    if let DecodeOrder::Random(s) = order {
        queue.shuffle(&mut rng::stream(*s, "decode-order", 0));
    }
    let mut rng = rng::stream(seed, "decode", 0);
    let mut current = query.clone();
    let mut posteriors = BTreeMap::new();
    let mut passes = 0;
    for slot in &queue {
        let (seq, queries) = current.encode_query(params.config.max_len)?;
        let idx = current.latents.iter().position(|l| l == slot).expect("queued latent is still masked");
        let post = model::posteriors(params, &seq, &queries[idx..=idx])?[0];
        passes += 1;
        let v = if sample { post.sample(&mut rng) } else { post.point() };
        current.latents.remove(idx);
        current.observed.values.insert(slot.clone(), v);
        posteriors.insert(slot.clone(), post);
    }
    Ok(Decoded {
        posteriors,
        order: queue,
        trace: current.observed,
        encoder_passes: passes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SviConfig {
    pub steps: usize,
    pub lr: f64,
    pub samples_per_step: usize,
    /// Plate minibatch size per step (every member when absent).
    pub minibatch_k: Option<usize>,
    pub seed: u64,
    pub clip_norm: f64,
    pub soft_delta_std: f64,
    /// Redraws of a sample whose joint density is zero.
    pub max_resamples: usize,
}

impl Default for SviConfig {
    fn default() -> Self {
        SviConfig {
            steps: 1000,
            lr: 1e-4,
            samples_per_step: 1,
            minibatch_k: None,
            seed: 0,
            clip_norm: 1.0,
            soft_delta_std: DEFAULT_SOFT_DELTA_STD,
            max_resamples: 10,
        }
    }
}

/// One set of observations and the latents to infer from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SviObservation {
    pub observed: Trace,
    pub latents: Vec<Slot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub step: usize,
    pub elbo: f64,
    pub wall_time: f64,
}

/// Restricts a trace to the given plate members.
pub fn restrict_members(program: &Program, trace: &Trace, indices: &[usize]) -> Trace {
    let Some(p) = program.plate() else { return trace.clone() };
    let plated: BTreeSet<_> = p.assigns().map(|a| a.target.clone()).collect();
    let keep: BTreeSet<usize> = indices.iter().copied().collect();
    let mut t = trace.clone();
    t.values.retain(|s, _| !(plated.contains(&s.name) && s.index.is_some_and(|i| !keep.contains(&i))));
    t.masked.retain(|s| !(plated.contains(&s.name) && s.index.is_some_and(|i| !keep.contains(&i))));
    let mut idx: Vec<usize> = keep.into_iter().collect();
    idx.sort_unstable();
    t.plate = Some(PlateMinibatch { indices: idx, total: p.total });
    t
}

/// Draws `k` plate members uniformly without replacement.
pub fn draw_members(total: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, total, k.min(total)).into_iter().map(|i| i + 1).collect();
    idx.sort_unstable();
    idx
}

fn full_members(program: &Program, trace: &Trace) -> Result<Option<usize>, InferError> {
    let Some(p) = program.plate() else { return Ok(None) };
    match &trace.plate {
        Some(mb) if mb.indices.len() != p.total => Err(InferError::IncompletePlate),
        _ => Ok(Some(p.total)),
    }
}

/// Stochastic variational finetuning of the whole network on the ELBO of
/// `program` given each observation set. Each step uses one observation set
/// (cycling), optionally a plate minibatch of size k with in-plate terms
/// scaled by n/k, and `samples_per_step` reparameterized draws from the
/// mean-field Gaussian the inference head defines.
pub fn svi_finetune<T: Scalar>(params: &ModelParams<T>, program: &Program, data: &[SviObservation], config: &SviConfig) -> Result<(ModelParams<T>, Vec<ElboRecord>), InferError> {
    let typed = infer_value_types(program);
    let mut totals = Vec::with_capacity(data.len());
    // Per observation set, the indices of latents drawn from q; deterministic
    // latents are recomputed from them instead.
    let mut sampled = Vec::with_capacity(data.len());
    for d in data {
        let mut idx = Vec::new();
        for (j, l) in d.latents.iter().enumerate() {
            let a = typed.assign(&l.name).ok_or_else(|| InferError::UnknownLatent(l.clone()))?;
            if !a.is_sample() {
                continue;
            }
            if a.value_type == ValueType::Binary {
                return Err(InferError::BinaryLatent(l.clone()));
            }
            idx.push(j);
        }
        if idx.is_empty() {
            return Err(InferError::NoSampledLatent);
        }
        sampled.push(idx);
        totals.push(full_members(program, &d.observed)?);
    }
    let mut out = params.clone();
    let mut trace = Vec::with_capacity(config.steps);
    if config.steps == 0 || data.is_empty() {
        return Ok((out, trace));
    }
    let start = Instant::now();
    let mut state = AdamState::new(&out.shapes(), AdamConfig::default());
    let mut rng = rng::stream(config.seed, "svi", 0);
    let s_count = config.samples_per_step.max(1);
    for step in 0..config.steps {
        let which = step % data.len();
        let obs = &data[which];
        let observed = match (totals[which], config.minibatch_k) {
            (Some(n), Some(k)) => restrict_members(program, &obs.observed, &draw_members(n, k, &mut rng)),
            _ => obs.observed.clone(),
        };
        let query = InferenceQuery::new(program.clone(), observed.clone(), obs.latents.clone());
        let (seq, queries) = query.encode_query(out.config.max_len)?;
        let positions: Vec<usize> = sampled[which].iter().map(|&j| queries[j].0).collect();
        let drawn: Vec<Slot> = sampled[which].iter().map(|&j| obs.latents[j].clone()).collect();
        let mut observed = observed;
        for l in &obs.latents {
            observed.values.remove(l);
        }
        let mut elbo_sum = 0.0;
        let mut zero_density = false;
        let (_, mut grads) = model::grad(&out, |tape: &mut Tape<T>, p| {
            let enc = model::encode(tape, p, &seq)?;
            let pred = model::continuous_head(tape, p, &enc, &positions)?;
            let pv = tape.value(pred).to_owned();
            let mut terms = Vec::with_capacity(s_count);
            for _ in 0..s_count {
                let mut accepted = None;
                for _ in 0..=config.max_resamples {
                    let eps: Vec<f64> = (0..positions.len()).map(|_| rng.sample(StandardNormal)).collect();
                    let mut t = observed.clone();
                    for (j, l) in drawn.iter().enumerate() {
                        let mu = pv[[j, 0]].as_f64();
                        let sd = clamp_log_std(pv[[j, 1]].as_f64()).exp();
                        t.values.insert(l.clone(), mu + sd * eps[j]);
                    }
                    let (lp, g) = exec::log_joint_grad(program, &t, &drawn, config.soft_delta_std, true).map_err(|_| ModelError::NonFiniteLoss)?;
                    if !is_log_zero(lp) && lp.is_finite() {
                        accepted = Some((eps, lp, g));
                        break;
                    }
                }
                let Some((eps, lp, g)) = accepted else {
                    zero_density = true;
                    return Err(ModelError::NonFiniteLoss);
                };
                let eps_t: Vec<T> = eps.iter().map(|&e| T::of(e)).collect();
                let g_t: Vec<T> = g.iter().map(|&x| T::of(x)).collect();
                let term = tape.reparam_neg_elbo(pred, &eps_t, T::of(lp), &g_t, T::of(1.0 / s_count as f64));
                elbo_sum -= tape.scalar(term).as_f64();
                terms.push(term);
            }
            Ok(tape.sum(&terms))
        })
        .map_err(|e| match e {
            _ if zero_density => InferError::ZeroDensity { step },
            ModelError::NonFiniteLoss => InferError::NonFiniteElbo { step },
            other => InferError::Model(other),
        })?;
        clip_global_norm(&mut grads, config.clip_norm);
        adam_step(&mut out.tensors, &grads, &mut state, config.lr);
        trace.push(ElboRecord {
            step,
            elbo: elbo_sum,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((out, trace))
}

/// Precision-weighted fusion of Gaussian experts.
pub fn product_of_experts(experts: &[Posterior]) -> Result<Posterior, InferError> {
    if experts.is_empty() {
        return Err(InferError::NoExperts);
    }
    let mut precision = 0.0;
    let mut weighted = 0.0;
    for e in experts {
        match *e {
            Posterior::Gaussian { mean, std } if std > 0.0 && std.is_finite() => {
                let t = 1.0 / (std * std);
                precision += t;
                weighted += mean * t;
            }
            _ => return Err(InferError::BadExpert),
        }
    }
    let var = 1.0 / precision;
    Ok(Posterior::Gaussian {
        mean: weighted * var,
        std: var.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoeResult {
    pub combined: BTreeMap<Slot, Posterior>,
    /// One zero-shot posterior map per minibatch.
    pub experts: Vec<BTreeMap<Slot, Posterior>>,
    pub minibatches: Vec<Vec<usize>>,
}

/// Zero-shot inference on `resamples` random plate minibatches of size `k`,
/// fused per latent with [`product_of_experts`]. `observed` must hold every
/// plate member.
pub fn poe_zero_shot<T: Scalar>(params: &ModelParams<T>, program: &Program, observed: &Trace, latents: &[Slot], k: usize, resamples: usize, seed: u64) -> Result<PoeResult, InferError> {
    let n = full_members(program, observed)?.ok_or(InferError::NoPlate)?;
    let typed = infer_value_types(program);
    for l in latents {
        if typed.assign(&l.name).map(|a| a.value_type) == Some(ValueType::Binary) {
            return Err(InferError::BinaryLatent(l.clone()));
        }
    }
    let mut rng = rng::stream(seed, "poe", 0);
    let mut experts = Vec::with_capacity(resamples);
    let mut minibatches = Vec::with_capacity(resamples);
    for _ in 0..resamples.max(1) {
        let mb = draw_members(n, k, &mut rng);
        let q = InferenceQuery::new(program.clone(), restrict_members(program, observed, &mb), latents.to_vec());
        experts.push(zero_shot(params, &q)?);
        minibatches.push(mb);
    }
    let mut combined = BTreeMap::new();
    for l in latents {
        let parts: Vec<Posterior> = experts.iter().map(|e| e[l]).collect();
        combined.insert(l.clone(), product_of_experts(&parts)?);
    }
    Ok(PoeResult { combined, experts, minibatches })
}
