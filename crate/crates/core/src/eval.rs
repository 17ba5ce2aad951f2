//! Held-out metrics and sampling diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ast::{dependency_graph, Program, Rhs, Slot, VarName};
use crate::dataset::{DatasetError, Example};
use crate::exec::{self, is_log_zero, ExecError, Trace, DEFAULT_SOFT_DELTA_STD, LOG_ZERO};
use crate::infer::{self, InferError, InferenceQuery};
use crate::nn::attention::{attention_line_summary, AttentionError};
use crate::nn::model::{self, ModelError, ModelParams, Posterior};
use crate::nn::tape::Tape;
use crate::nn::tokenizer;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no initial state with nonzero density after {0} draws")]
    NoInitialState(usize),
    #[error("within-chain variance is zero; R-hat is undefined")]
    ZeroWithinVariance,
}

/// Mean log q of the stored masked assignments: averaged per instance, then
/// over instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPosteriorReport {
    pub mean: f64,
    pub per_instance: Vec<f64>,
}

pub fn eval_log_posterior<T: Scalar>(params: &ModelParams<T>, examples: &[Example]) -> Result<LogPosteriorReport, EvalError> {
    let per_instance = examples
        .par_iter()
        .map(|ex| {
            let inst = ex.stored(0.0);
            let queries: Vec<_> = inst.inf_targets.iter().map(|t| (t.pos, t.value_type)).collect();
            let post = model::posteriors(params, &inst.inf_tokens, &queries)?;
            let lq: f64 = post.iter().zip(&inst.inf_targets).map(|(q, t)| q.log_prob(t.value)).sum();
            Ok(lq / inst.inf_targets.len() as f64)
        })
        .collect::<Result<Vec<f64>, ModelError>>()?;
    let mean = if per_instance.is_empty() { f64::NAN } else { per_instance.iter().sum::<f64>() / per_instance.len() as f64 };
    Ok(LogPosteriorReport { mean, per_instance })
}

/// Running mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }
    pub fn count(&self) -> usize {
        self.n
    }
    pub fn mean(&self) -> f64 {
        self.mean
    }
    /// Unbiased sample variance (0 for fewer than two values).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwReport {
    /// One entry per draw; zero-density draws hold the sentinel.
    pub log_iw: Vec<f64>,
    /// Sample variance over the draws with nonzero joint density.
    pub variance: f64,
    pub mean_log_q: f64,
    /// Draws whose joint density was zero.
    pub log_zero: usize,
    /// Fewer than two draws had nonzero density.
    pub degenerate: bool,
}

/// Correctly rounded sum of `xs` (Shewchuk's exact partials).
pub fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the partials to one value, top down
    let mut hi = 0.0;
    while let Some(x) = partials.pop() {
        let prev = hi;
        hi = prev + x;
        let lo = x - (hi - prev);
        if lo != 0.0 {
            if let Some(&next) = partials.last() {
                if (lo < 0.0) == (next < 0.0) {
                    let y = lo * 2.0;
                    let x2 = hi + y;
                    if y == x2 - hi {
                        hi = x2;
                    }
                }
            }
            break;
        }
    }
    hi
}

/// Importance weights `log p(x, z) − log q(z | x)` for `z ~ q` given fixed
/// per-latent posteriors. Each weight is the exactly rounded sum of the joint's
/// terms and the negated proposal terms, so a constant weight stays constant.
pub fn log_iw_with(program: &Program, observed: &Trace, latents: &[Slot], q: &[Posterior], n_samples: usize, rng: &mut Rng, soft_delta_std: f64) -> Result<IwReport, EvalError> {
    let mut log_iw = Vec::with_capacity(n_samples);
    let mut w = Welford::default();
    let mut lq_sum = 0.0;
    let mut zero = 0;
    for _ in 0..n_samples {
        let mut t = observed.clone();
        let mut lq = Vec::with_capacity(latents.len());
        for (slot, post) in latents.iter().zip(q) {
            let z = post.sample(rng);
            lq.push(post.log_prob(z));
            t.masked.remove(slot);
            t.values.insert(slot.clone(), z);
        }
        lq_sum += lq.iter().sum::<f64>();
        match exec::log_joint_terms(program, &t, soft_delta_std)? {
            Some(terms) if lq.iter().all(|x| x.is_finite()) => {
                let v = exact_sum(terms.into_iter().chain(lq.iter().map(|x| -x)));
                w.push(v);
                log_iw.push(v);
            }
            _ => {
                zero += 1;
                log_iw.push(LOG_ZERO);
            }
        }
    }
    Ok(IwReport {
        log_iw,
        variance: w.variance(),
        mean_log_q: if n_samples == 0 { f64::NAN } else { lq_sum / n_samples as f64 },
        log_zero: zero,
        degenerate: w.count() < 2,
    })
}

/// [`log_iw_with`] using the model's zero-shot posterior for the query.
pub fn var_log_iw<T: Scalar>(params: &ModelParams<T>, query: &InferenceQuery, n_samples: usize, seed: u64) -> Result<IwReport, EvalError> {
    let q = infer::zero_shot_list(params, query)?;
    let mut rng = rng::stream(seed, "log-iw", 0);
    log_iw_with(&query.program, &query.observed, &query.latents, &q, n_samples, &mut rng, DEFAULT_SOFT_DELTA_STD)
}

/// [`var_log_iw`] for each example's stored mask.
pub fn var_log_iw_corpus<T: Scalar>(params: &ModelParams<T>, examples: &[Example], n_samples: usize, seed: u64) -> Result<Vec<IwReport>, EvalError> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let (program, trace) = ex.program_and_trace()?;
            let q = InferenceQuery::from_trace(&program, &trace, &ex.stored_latents());
            var_log_iw(params, &q, n_samples, rng::derive(seed, "example", i as u64))
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    for s in [a, b] {
        if s.len() < 10 {
            return Err(EvalError::TooFewSamples { need: 10, got: s.len() });
        }
        if s.iter().any(|x| x.is_nan()) {
            return Err(EvalError::Config("NaN sample".into()));
        }
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let lambda = d * (na * nb / (na + nb)).sqrt();
    Ok((d, kolmogorov_survival(lambda)))
}

/// `P(K > λ) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² λ²)`. For small λ the
/// equivalent theta-function form is summed instead, since the alternating
/// series converges too slowly there.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // P(K ≤ λ) = √(2π)/λ Σ exp(−(2j−1)² π² / (8λ²))
        let mut cdf = 0.0;
        for j in 1..=100 {
            let k = (2 * j - 1) as f64;
            let term = (-k * k * std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < 1e-10 * cdf.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-10 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Per-dimension KS tests of paired sample sets. The summary p-value is the
/// smallest per-dimension p-value with a Bonferroni correction.
pub fn ks_per_dimension(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Vec<(f64, f64)>, f64), EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Config(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    let per: Vec<(f64, f64)> = a.iter().zip(b).map(|(x, y)| ks_two_sample(x, y)).collect::<Result<_, _>>()?;
    let min_p = per.iter().map(|r| r.1).fold(1.0, f64::min);
    Ok((per, (min_p * a.len() as f64).min(1.0)))
}

/// Split-chain potential scale reduction.
pub fn r_hat(chains: &[Vec<f64>]) -> Result<f64, EvalError> {
    if chains.len() < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: chains.len() });
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return Err(EvalError::TooFewSamples { need: 4, got: n });
    }
    let half = n / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..n];
        halves.push(&c[..half]);
        halves.push(&c[n - half..]);
    }
    let stats: Vec<Welford> = halves
        .iter()
        .map(|h| {
            let mut w = Welford::default();
            h.iter().for_each(|&x| w.push(x));
            w
        })
        .collect();
    let w_mean = stats.iter().map(|s| s.variance()).sum::<f64>() / stats.len() as f64;
    if !(w_mean > 0.0) {
        return Err(EvalError::ZeroWithinVariance);
    }
    let mut means = Welford::default();
    stats.iter().for_each(|s| means.push(s.mean()));
    let nf = half as f64;
    let b = nf * means.variance();
    let v_hat = (nf - 1.0) / nf * w_mean + b / nf;
    Ok((v_hat / w_mean).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Proposal {
    /// Independent per-latent posteriors (for example the model's zero-shot output).
    Posterior(BTreeMap<Slot, Posterior>),
    /// Ancestral sampling of the latents from the program given the observations.
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Model,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhConfig {
    pub chains: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub proposal: ProposalKind,
    pub seed: u64,
    pub max_restarts: usize,
    pub soft_delta_std: f64,
}

impl Default for MhConfig {
    fn default() -> Self {
        MhConfig {
            chains: 10,
            steps: 1000,
            burn_in: 0,
            proposal: ProposalKind::Model,
            seed: 0,
            max_restarts: 1000,
            soft_delta_std: DEFAULT_SOFT_DELTA_STD,
        }
    }
}

impl MhConfig {
    pub fn check(&self) -> Result<(), EvalError> {
        if self.chains < 1 || self.steps <= self.burn_in {
            return Err(EvalError::Config(format!("chains {} steps {} burn_in {}", self.chains, self.steps, self.burn_in)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhResult {
    pub latents: Vec<Slot>,
    /// `samples[chain][latent]` is the post-burn-in series.
    pub samples: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<f64>,
}

impl MhResult {
    /// Per-latent split R-hat; `None` where it is undefined.
    pub fn r_hat_per_latent(&self) -> Vec<Option<f64>> {
        (0..self.latents.len())
            .map(|l| {
                let chains: Vec<Vec<f64>> = self.samples.iter().map(|c| c[l].clone()).collect();
                r_hat(&chains).ok()
            })
            .collect()
    }

    /// Largest defined per-latent R-hat.
    pub fn r_hat_max(&self) -> Option<f64> {
        self.r_hat_per_latent().into_iter().flatten().reduce(f64::max)
    }
}

/// Independence Metropolis–Hastings over the values of `latents`, with every
/// deterministic statement recomputed from the current state.
pub fn mh_sample(program: &Program, observed: &Trace, latents: &[Slot], proposal: &Proposal, config: &MhConfig) -> Result<MhResult, EvalError> {
    config.check()?;
    if let Proposal::Posterior(q) = proposal {
        if let Some(l) = latents.iter().find(|l| !q.contains_key(*l)) {
            return Err(EvalError::Config(format!("proposal has no posterior for `{l}`")));
        }
    }
    let keep: BTreeSet<Slot> = observed.values.keys().filter(|s| !latents.contains(s)).cloned().collect();

    // (state, log target, log proposal density)
    let propose = |rng: &mut Rng| -> Option<(Trace, f64, f64)> {
        let (t, lq) = match proposal {
            Proposal::Posterior(q) => {
                let mut t = observed.clone();
                let mut lq = 0.0;
                for l in latents {
                    let z = q[l].sample(rng);
                    lq += q[l].log_prob(z);
                    t.values.insert(l.clone(), z);
                }
                (exec::recompute_deterministic(program, &t).ok()?, lq)
            }
            Proposal::Prior => {
                let t = exec::run_conditioned(program, observed, &keep, rng).ok()?;
                let lq = exec::log_density_at(program, &t, latents).ok()?;
                (t, lq)
            }
        };
        let lp = exec::log_joint(program, &t, config.soft_delta_std).ok()?;
        if is_log_zero(lp) || is_log_zero(lq) || !lp.is_finite() || !lq.is_finite() {
            return None;
        }
        Some((t, lp, lq))
    };

    let chains: Vec<Result<(Vec<Vec<f64>>, f64), EvalError>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(config.seed, "mh", c as u64);
            let mut state = None;
            for _ in 0..config.max_restarts.max(1) {
                if let Some(s) = propose(&mut rng) {
                    state = Some(s);
                    break;
                }
            }
            let (mut cur, mut cur_lp, mut cur_lq) = state.ok_or(EvalError::NoInitialState(config.max_restarts))?;
            let mut series = vec![Vec::with_capacity(config.steps - config.burn_in); latents.len()];
            let mut accepted = 0usize;
            for step in 0..config.steps {
                if let Some((t, lp, lq)) = propose(&mut rng) {
                    let log_ratio = (lp + cur_lq) - (cur_lp + lq);
                    if log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio {
                        cur = t;
                        cur_lp = lp;
                        cur_lq = lq;
                        accepted += 1;
                    }
                }
                if step >= config.burn_in {
                    for (l, s) in latents.iter().zip(series.iter_mut()) {
                        s.push(cur.get(l).unwrap_or(f64::NAN));
                    }
                }
            }
            Ok((series, accepted as f64 / config.steps as f64))
        })
        .collect();
    let mut samples = Vec::with_capacity(chains.len());
    let mut acceptance = Vec::with_capacity(chains.len());
    for c in chains {
        let (s, a) = c?;
        samples.push(s);
        acceptance.push(a);
    }
    Ok(MhResult {
        latents: latents.to_vec(),
        samples,
        acceptance,
    })
}

/// MH query from a full trace: `hidden` sample statements become latents,
/// and every deterministic slot that depends on one of them is hidden too.
pub fn mh_query(program: &Program, trace: &Trace, hidden: &[Slot]) -> Result<(Trace, Vec<Slot>, Vec<Slot>), EvalError> {
    let graph = dependency_graph(program).map_err(ExecError::from)?;
    let latents: Vec<Slot> = hidden
        .iter()
        .filter(|s| program.assign(&s.name).is_some_and(|a| matches!(a.rhs, Rhs::Sample { .. })))
        .cloned()
        .collect();
    let mut tainted: BTreeSet<VarName> = latents.iter().map(|s| s.name.clone()).collect();
    let mut dependents = Vec::new();
    for (slot, a) in program.instances(trace.members()) {
        if matches!(a.rhs, Rhs::Det(_)) && graph.parents(&a.target).any(|p| tainted.contains(p)) {
            tainted.insert(a.target.clone());
            dependents.push(slot);
        }
    }
    let mut observed = trace.clone();
    for s in latents.iter().chain(&dependents) {
        observed.values.remove(s);
    }
    observed.masked.clear();
    Ok((observed, latents, dependents))
}

/// Model proposal for [`mh_sample`]: zero-shot posteriors with latents and
/// their deterministic dependents masked in the text.
pub fn model_proposal<T: Scalar>(params: &ModelParams<T>, program: &Program, observed: &Trace, latents: &[Slot], dependents: &[Slot]) -> Result<Proposal, EvalError> {
    let mut all = latents.to_vec();
    all.extend(dependents.iter().cloned());
    let q = InferenceQuery::new(program.clone(), observed.clone(), all);
    let post = infer::zero_shot(params, &q)?;
    Ok(Proposal::Posterior(post.into_iter().filter(|(s, _)| latents.contains(s)).collect()))
}

/// One row of an attention heatmap: which slots are masked and whose query
/// row is reported.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPattern {
    pub label: String,
    pub masked: Vec<Slot>,
    pub focus: Slot,
}

/// Every assignment masked in turn.
pub fn mask_each(program: &Program, trace: &Trace) -> Vec<HeatmapPattern> {
    program
        .instances(trace.members())
        .into_iter()
        .map(|(s, _)| HeatmapPattern {
            label: format!("mask {s}"),
            masked: vec![s.clone()],
            focus: s,
        })
        .collect()
}

/// Rows keyed by observed sets: everything outside `observed` is masked and
/// the `focus` row is reported.
pub fn observed_sets(program: &Program, trace: &Trace, focus: &Slot, sets: &[Vec<Slot>]) -> Vec<HeatmapPattern> {
    let all: Vec<Slot> = program.instances(trace.members()).into_iter().map(|(s, _)| s).collect();
    sets.iter()
        .map(|obs| {
            let names: Vec<String> = obs.iter().map(|s| s.to_string()).collect();
            HeatmapPattern {
                label: format!("observe {}", names.join(" ")),
                masked: all.iter().filter(|s| !obs.contains(s)).cloned().collect(),
                focus: focus.clone(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.matrix) {
            out.push_str(r);
            for v in row {
                out.push_str(&format!("\t{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Line-averaged last-layer attention of each pattern's focus row.
pub fn attention_heatmap<T: Scalar>(params: &ModelParams<T>, program: &Program, trace: &Trace, patterns: &[HeatmapPattern]) -> Result<Heatmap, EvalError> {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut matrix = Vec::new();
    for pat in patterns {
        let masks: BTreeSet<Slot> = pat.masked.iter().cloned().collect();
        let text = crate::text::render(program, trace, &masks).map_err(InferError::from)?;
        let seq = tokenizer::tokenize_max(&text, params.config.max_len).map_err(InferError::from)?;
        let mut tape = Tape::new(&params.tensors);
        let enc = model::encode(&mut tape, params, &seq)?;
        let att: Vec<_> = enc.attention.iter().map(|a| tape.value(*a).to_owned()).collect();
        let summary = attention_line_summary(&att, &seq)?;
        let idx = summary
            .rows
            .iter()
            .position(|r| *r == pat.focus.to_string())
            .ok_or_else(|| EvalError::Config(format!("focus `{}` is not masked in pattern `{}`", pat.focus, pat.label)))?;
        cols = summary.cols.clone();
        rows.push(pat.label.clone());
        matrix.push(summary.matrix[idx].clone());
    }
    Ok(Heatmap { rows, cols, matrix })
}
