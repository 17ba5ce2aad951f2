//! Pre-norm transformer encoder with a masked-token head and an inference head.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{clamp_log_std, sigmoid, Tape, Var};
use super::tokenizer::{self, TokenSeq, NUM, PAD};
use crate::ast::ValueType;
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            max_len: tokenizer::DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("sequence of {len} tokens exceeds the model's maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("position {pos} is out of bounds for a sequence of {len} tokens")]
    OutOfBounds { pos: usize, len: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.layers == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return Err(ModelError::Config("layers, max_len and ff_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Index of every parameter tensor in [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub num_proj: usize,
    pub layers: Vec<LayerIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub inf_c_w: usize,
    pub inf_c_b: usize,
    pub inf_b_w: usize,
    pub inf_b_b: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Tensor names, shapes and initializers in storage order.
fn spec(config: &ModelConfig) -> (Layout, Vec<(String, (usize, usize), Init)>) {
    let d = config.d_model;
    let v = tokenizer::vocab_size();
    let mut out = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| {
        out.push((name, shape, init));
        out.len() - 1
    };
    let tok_emb = add("tok_emb".into(), (v, d), Init::Normal);
    let pos_emb = add("pos_emb".into(), (config.max_len, d), Init::Normal);
    let num_proj = add("num_proj".into(), (3, d), Init::Normal);
    let layers = (0..config.layers)
        .map(|l| LayerIds {
            ln1_g: add(format!("layer{l}.ln1_g"), (1, d), Init::Ones),
            ln1_b: add(format!("layer{l}.ln1_b"), (1, d), Init::Zeros),
            w_qkv: add(format!("layer{l}.w_qkv"), (d, 3 * d), Init::Normal),
            b_qkv: add(format!("layer{l}.b_qkv"), (1, 3 * d), Init::Zeros),
            w_o: add(format!("layer{l}.w_o"), (d, d), Init::Normal),
            b_o: add(format!("layer{l}.b_o"), (1, d), Init::Zeros),
            ln2_g: add(format!("layer{l}.ln2_g"), (1, d), Init::Ones),
            ln2_b: add(format!("layer{l}.ln2_b"), (1, d), Init::Zeros),
            w_1: add(format!("layer{l}.w_1"), (d, config.ff_mult * d), Init::Normal),
            b_1: add(format!("layer{l}.b_1"), (1, config.ff_mult * d), Init::Zeros),
            w_2: add(format!("layer{l}.w_2"), (config.ff_mult * d, d), Init::Normal),
            b_2: add(format!("layer{l}.b_2"), (1, d), Init::Zeros),
        })
        .collect();
    let layout = Layout {
        tok_emb,
        pos_emb,
        num_proj,
        layers,
        lnf_g: add("lnf_g".into(), (1, d), Init::Ones),
        lnf_b: add("lnf_b".into(), (1, d), Init::Zeros),
        mlm_w: add("mlm_w".into(), (d, v), Init::Normal),
        mlm_b: add("mlm_b".into(), (1, v), Init::Zeros),
        inf_c_w: add("inf_c_w".into(), (d, 2), Init::Zeros),
        inf_c_b: add("inf_c_b".into(), (1, 2), Init::Zeros),
        inf_b_w: add("inf_b_w".into(), (d, 1), Init::Zeros),
        inf_b_b: add("inf_b_b".into(), (1, 1), Init::Zeros),
    };
    (layout, out)
}

#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Array2<T>>,
    pub layout: Layout,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.check()?;
        let (layout, spec) = spec(config);
        let mut rng = rng::stream(seed, "model-init", 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in spec {
            let t = match init {
                Init::Zeros => Array2::zeros(shape),
                Init::Ones => Array2::from_elem(shape, T::one()),
                Init::Normal => Array2::from_shape_simple_fn(shape, || T::of(0.02 * rng.sample::<f64, _>(StandardNormal))),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.mapv(|v| U::of(v.as_f64()))).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.dim()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// `(sign, ln(1+|v|), clamp(v, −100, 100)/100)`
pub fn numeric_features(v: f64) -> [f64; 3] {
    [v.signum() * (v != 0.0) as u8 as f64, v.abs().ln_1p(), v.clamp(-100.0, 100.0) / 100.0]
}

pub struct Encoded {
    /// Final (layer-normed) vectors, one row per token.
    pub hidden: Var,
    /// Last-layer attention probabilities, one `L×L` matrix per head.
    pub attention: Vec<Var>,
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, layer: usize) -> Result<(), ModelError> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

/// Runs the encoder on one (possibly padded) sequence.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, seq: &TokenSeq) -> Result<Encoded, ModelError> {
    let cfg = &params.config;
    let lay = &params.layout;
    let n = seq.ids.len();
    if n > cfg.max_len {
        return Err(ModelError::TooLong { len: n, max: cfg.max_len });
    }
    let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let allowed: Vec<bool> = seq.ids.iter().map(|&i| i != PAD).collect();
    let mut feats = Array2::<T>::zeros((n, 3));
    for (i, (&id, p)) in seq.ids.iter().zip(&seq.payloads).enumerate() {
        if let (NUM, Some(v)) = (id, p) {
            for (j, f) in numeric_features(*v).into_iter().enumerate() {
                feats[[i, j]] = T::of(f);
            }
        }
    }

    let tok_table = tape.param(lay.tok_emb);
    let pos_table = tape.param(lay.pos_emb);
    let proj = tape.param(lay.num_proj);
    let tok = tape.gather(tok_table, &ids);
    let pos = tape.gather(pos_table, &positions);
    let feats = tape.leaf(feats);
    let num = tape.matmul(feats, proj);
    let x0 = tape.add(tok, pos);
    let mut x = tape.add(x0, num);

    let d = cfg.d_model;
    let dh = d / cfg.heads;
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    let mut attention = Vec::new();
    for (l, ids) in lay.layers.iter().enumerate() {
        let g1 = tape.param(ids.ln1_g);
        let b1 = tape.param(ids.ln1_b);
        let h = tape.layer_norm(x, g1, b1);
        let w_qkv = tape.param(ids.w_qkv);
        let b_qkv = tape.param(ids.b_qkv);
        let qkv = tape.matmul(h, w_qkv);
        let qkv = tape.add_row_bias(qkv, b_qkv);
        let mut heads = Vec::with_capacity(cfg.heads);
        let last = l + 1 == lay.layers.len();
        if last {
            attention.clear();
        }
        for hd in 0..cfg.heads {
            let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh);
            let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
            let scores = tape.matmul_bt(q, k);
            let scores = tape.scale(scores, inv_sqrt);
            let p = tape.softmax(scores, Some(&allowed));
            if last {
                attention.push(p);
            }
            heads.push(tape.matmul(p, v));
        }
        let o = tape.concat_cols(&heads);
        let w_o = tape.param(ids.w_o);
        let b_o = tape.param(ids.b_o);
        let o = tape.matmul(o, w_o);
        let o = tape.add_row_bias(o, b_o);
        x = tape.add(x, o);

        let g2 = tape.param(ids.ln2_g);
        let b2 = tape.param(ids.ln2_b);
        let h = tape.layer_norm(x, g2, b2);
        let w_1 = tape.param(ids.w_1);
        let b_1 = tape.param(ids.b_1);
        let w_2 = tape.param(ids.w_2);
        let b_2 = tape.param(ids.b_2);
        let f = tape.matmul(h, w_1);
        let f = tape.add_row_bias(f, b_1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w_2);
        let f = tape.add_row_bias(f, b_2);
        x = tape.add(x, f);
        check_finite(tape, x, l)?;
    }
    let g = tape.param(lay.lnf_g);
    let b = tape.param(lay.lnf_b);
    let hidden = tape.layer_norm(x, g, b);
    Ok(Encoded { hidden, attention })
}

fn check_positions(positions: &[usize], len: usize) -> Result<(), ModelError> {
    match positions.iter().find(|&&p| p >= len) {
        Some(&pos) => Err(ModelError::OutOfBounds { pos, len }),
        None => Ok(()),
    }
}

/// Masked-token logits (`m × |V|`) at `positions`.
pub fn mlm_logits<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, enc: &Encoded, positions: &[usize]) -> Result<Var, ModelError> {
    check_positions(positions, tape.value(enc.hidden).nrows())?;
    let rows = tape.gather(enc.hidden, positions);
    let w = tape.param(params.layout.mlm_w);
    let b = tape.param(params.layout.mlm_b);
    let y = tape.matmul(rows, w);
    Ok(tape.add_row_bias(y, b))
}

/// Continuous head output (`m × 2`: mean, raw log-std) at `positions`.
pub fn continuous_head<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, enc: &Encoded, positions: &[usize]) -> Result<Var, ModelError> {
    check_positions(positions, tape.value(enc.hidden).nrows())?;
    let rows = tape.gather(enc.hidden, positions);
    let w = tape.param(params.layout.inf_c_w);
    let b = tape.param(params.layout.inf_c_b);
    let y = tape.matmul(rows, w);
    Ok(tape.add_row_bias(y, b))
}

/// Binary head output (`m × 1` logits) at `positions`.
pub fn binary_head<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, enc: &Encoded, positions: &[usize]) -> Result<Var, ModelError> {
    check_positions(positions, tape.value(enc.hidden).nrows())?;
    let rows = tape.gather(enc.hidden, positions);
    let w = tape.param(params.layout.inf_b_w);
    let b = tape.param(params.layout.inf_b_b);
    let y = tape.matmul(rows, w);
    Ok(tape.add_row_bias(y, b))
}

/// Approximate posterior for one masked assignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Posterior {
    Gaussian { mean: f64, std: f64 },
    Bernoulli { p: f64 },
}

impl Posterior {
    pub fn gaussian_from_raw(mean: f64, raw_log_std: f64) -> Self {
        Posterior::Gaussian {
            mean,
            std: clamp_log_std(raw_log_std).exp(),
        }
    }

    pub fn bernoulli_from_logit(logit: f64) -> Self {
        Posterior::Bernoulli {
            p: sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON),
        }
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        match *self {
            Posterior::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Posterior::Bernoulli { p } => {
                if x == 1.0 {
                    p.ln()
                } else if x == 0.0 {
                    (1.0 - p).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Posterior::Gaussian { mean, .. } => mean,
            Posterior::Bernoulli { p } => p,
        }
    }

    /// Point value written back during decoding: the mean, or the mode for binaries.
    pub fn point(&self) -> f64 {
        match *self {
            Posterior::Gaussian { mean, .. } => mean,
            Posterior::Bernoulli { p } => (p >= 0.5) as u8 as f64,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            Posterior::Gaussian { mean, std } => mean + std * rng.sample::<f64, _>(StandardNormal),
            Posterior::Bernoulli { p } => (rng.gen::<f64>() < p) as u8 as f64,
        }
    }

    pub fn value_type(&self) -> ValueType {
        match self {
            Posterior::Gaussian { .. } => ValueType::Continuous,
            Posterior::Bernoulli { .. } => ValueType::Binary,
        }
    }
}

/// One forward pass returning a posterior for every query position.
pub fn posteriors<T: Scalar>(params: &ModelParams<T>, seq: &TokenSeq, queries: &[(usize, ValueType)]) -> Result<Vec<Posterior>, ModelError> {
    let mut tape = Tape::new(&params.tensors);
    let enc = encode(&mut tape, params, seq)?;
    heads(&mut tape, params, &enc, queries)
}

/// Reads posteriors off an encoded sequence, in query order.
pub fn heads<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, enc: &Encoded, queries: &[(usize, ValueType)]) -> Result<Vec<Posterior>, ModelError> {
    let cont: Vec<usize> = queries.iter().filter(|q| q.1 == ValueType::Continuous).map(|q| q.0).collect();
    let bin: Vec<usize> = queries.iter().filter(|q| q.1 == ValueType::Binary).map(|q| q.0).collect();
    let c = if cont.is_empty() { None } else { Some(continuous_head(tape, params, enc, &cont)?) };
    let b = if bin.is_empty() { None } else { Some(binary_head(tape, params, enc, &bin)?) };
    let (mut ci, mut bi) = (0, 0);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        match q.1 {
            ValueType::Continuous => {
                let v = tape.value(c.expect("continuous queries present"));
                out.push(Posterior::gaussian_from_raw(v[[ci, 0]].as_f64(), v[[ci, 1]].as_f64()));
                ci += 1;
            }
            ValueType::Binary => {
                let v = tape.value(b.expect("binary queries present"));
                out.push(Posterior::bernoulli_from_logit(v[[bi, 0]].as_f64()));
                bi += 1;
            }
        }
    }
    Ok(out)
}

/// Evaluates `loss` on a fresh tape and returns its value and exact gradients.
pub fn grad<T: Scalar, F>(params: &ModelParams<T>, loss: F) -> Result<(T, Vec<Array2<T>>), ModelError>
where
    F: FnOnce(&mut Tape<T>, &ModelParams<T>) -> Result<Var, ModelError>,
{
    let mut tape = Tape::new(&params.tensors);
    let root = loss(&mut tape, params)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    let mut grads = params.zeros_like();
    tape.backward(root, &mut grads);
    Ok((value, grads))
}
