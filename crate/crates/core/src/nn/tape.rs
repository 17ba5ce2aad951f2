//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records one forward computation. Parameters are borrowed from
//! the caller and their gradients are accumulated into a caller-owned buffer
//! on [`Tape::backward`].

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

pub type Tensor<T> = Array2<T>;

/// Lower and upper clamp for Gaussian log-standard-deviations.
pub const LOG_STD_MIN: f64 = -7.0;
pub const LOG_STD_MAX: f64 = 3.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        probs: Array2<T>,
        targets: Vec<usize>,
        weight: T,
    },
    GaussianNll {
        pred: Var,
        targets: Vec<T>,
        weight: T,
    },
    BernoulliNll {
        logits: Var,
        targets: Vec<T>,
        weight: T,
    },
    ReparamElbo {
        pred: Var,
        eps: Vec<T>,
        grad_logp: Vec<T>,
        weight: T,
    },
    Sum(Vec<Var>),
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Array2<T>],
    nodes: Vec<Node<T>>,
}

pub fn clamp_log_std<T: Scalar>(s: T) -> T {
    s.max(T::of(LOG_STD_MIN)).min(T::of(LOG_STD_MAX))
}

fn in_clamp<T: Scalar>(s: T) -> bool {
    s > T::of(LOG_STD_MIN) && s < T::of(LOG_STD_MAX)
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x);
    (y, dy)
}

/// Row-wise softmax; columns with `allowed[j] == false` get probability 0.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<T>, allowed: Option<&[bool]>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mut mx = T::neg_infinity();
        for (j, v) in row.iter().enumerate() {
            if allowed.is_none_or(|a| a[j]) && *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if allowed.is_none_or(|a| a[j]) {
                *v = (*v - mx).exp();
                sum = sum + *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Array2<T>]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Option<Array2<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(x), _) => x.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            _ => unreachable!("every non-parameter node stores its value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn leaf(&mut self, x: Array2<T>) -> Var {
        self.push(Some(x), Op::Leaf)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.push(None, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b));
        self.push(Some(y), Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(Some(y), Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) + &self.value(b);
        self.push(Some(y), Op::Add(a, b))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let y = &self.value(a) + &self.value(bias);
        self.push(Some(y), Op::AddRowBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).mapv(|v| v * s);
        self.push(Some(y), Op::Scale(a, s))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let y = t.select(Axis(0), ids);
        self.push(Some(y), Op::Gather(table, ids.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        let dn = T::of(d as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(r);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * r;
            }
        }
        let y = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(
            Some(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| gelu(v).0);
        self.push(Some(y), Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Var {
        let y = softmax_rows(self.value(x), allowed);
        self.push(Some(y), Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(Some(y), Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Some(y), Op::ConcatCols(parts.to_vec()))
    }

    /// `weight · Σᵢ −log softmax(logitsᵢ)[targetᵢ]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], weight: T) -> Var {
        let probs = softmax_rows(self.value(logits), None);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss = loss - probs[[i, t]].max(T::min_positive_value()).ln();
        }
        self.push(
            Some(Array2::from_elem((1, 1), loss * weight)),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weight,
            },
        )
    }

    /// `weight · Σᵢ −log N(tᵢ; μᵢ, exp(clamp(sᵢ)))` for rows `(μᵢ, sᵢ)` of `pred`.
    pub fn gaussian_nll_sum(&mut self, pred: Var, targets: &[T], weight: T) -> Var {
        let p = self.value(pred);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let s = clamp_log_std(p[[i, 1]]);
            let z = (t - p[[i, 0]]) / s.exp();
            loss = loss + T::of(0.5) * z * z + s + T::of(HALF_LN_2PI);
        }
        self.push(
            Some(Array2::from_elem((1, 1), loss * weight)),
            Op::GaussianNll {
                pred,
                targets: targets.to_vec(),
                weight,
            },
        )
    }

    /// `weight · Σᵢ −log Bernoulli(tᵢ; sigmoid(lᵢ))`.
    pub fn bernoulli_nll_sum(&mut self, logits: Var, targets: &[T], weight: T) -> Var {
        let l = self.value(logits);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss = loss + softplus(l[[i, 0]]) - t * l[[i, 0]];
        }
        self.push(
            Some(Array2::from_elem((1, 1), loss * weight)),
            Op::BernoulliNll {
                logits,
                targets: targets.to_vec(),
                weight,
            },
        )
    }

    /// Negative single-sample ELBO for a mean-field Gaussian `q` with rows
    /// `(μⱼ, sⱼ)`, sample `zⱼ = μⱼ + exp(sⱼ)·εⱼ`, and externally computed
    /// `log p(z)` and its gradient `∂ log p / ∂zⱼ`.
    pub fn reparam_neg_elbo(&mut self, pred: Var, eps: &[T], log_p: T, grad_logp: &[T], weight: T) -> Var {
        let p = self.value(pred);
        let mut log_q = T::zero();
        for (j, &e) in eps.iter().enumerate() {
            log_q = log_q - T::of(0.5) * e * e - clamp_log_std(p[[j, 1]]) - T::of(HALF_LN_2PI);
        }
        self.push(
            Some(Array2::from_elem((1, 1), (log_q - log_p) * weight)),
            Op::ReparamElbo {
                pred,
                eps: eps.to_vec(),
                grad_logp: grad_logp.to_vec(),
                weight,
            },
        )
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut y = Array2::zeros((1, 1));
        for p in parts {
            y[[0, 0]] = y[[0, 0]] + self.value(*p).sum();
        }
        self.push(Some(y), Op::Sum(parts.to_vec()))
    }

    /// Back-propagates d(root)/d(·) and adds parameter gradients into `grads`.
    pub fn backward(&self, root: Var, grads: &mut [Array2<T>]) {
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(root).dim();
        g[root.0] = Some(Array2::from_elem(shape, T::one()));

        fn acc<T: Scalar>(g: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(i) => grads[*i] += &dy,
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulBT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddRowBias(a, b) => {
                    acc(&mut g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, dy);
                }
                Op::Scale(a, s) => acc(&mut g, *a, dy.mapv(|v| v * *s)),
                Op::Gather(t, ids) => {
                    let mut dt = Array2::zeros(self.value(*t).dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut r = dt.row_mut(id);
                        r += &dy.row(row);
                    }
                    acc(&mut g, *t, dt);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let (n, d) = xhat.dim();
                    let dn = T::of(d as f64);
                    let mut dx = Array2::zeros((n, d));
                    for i in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = dy[[i, j]] * gv[[0, j]];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[[i, j]];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = dy[[i, j]] * gv[[0, j]];
                            dx[[i, j]] = rstd[i] * (dh - m1 - xhat[[i, j]] * m2);
                        }
                    }
                    let dgain = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *gain, dgain);
                    acc(&mut g, *bias, dbias);
                    acc(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(|v| gelu(v).1);
                    dx *= &dy;
                    acc(&mut g, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(idx));
                    let mut dx = &dy * &y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        row.zip_mut_with(&yrow, |v, &yy| *v = *v - yy * s);
                    }
                    acc(&mut g, *x, dx);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*end]).assign(&dy);
                    acc(&mut g, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut g, *p, dy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    weight,
                } => {
                    let scale = dy[[0, 0]] * *weight;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] = d[[i, t]] - T::one();
                    }
                    d.mapv_inplace(|v| v * scale);
                    acc(&mut g, *logits, d);
                }
                Op::GaussianNll { pred, targets, weight } => {
                    let scale = dy[[0, 0]] * *weight;
                    let p = self.value(*pred);
                    let mut d = Array2::zeros(p.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        let s = clamp_log_std(p[[i, 1]]);
                        let inv_var = (-(s + s)).exp();
                        let r = t - p[[i, 0]];
                        d[[i, 0]] = -r * inv_var * scale;
                        if in_clamp(p[[i, 1]]) {
                            d[[i, 1]] = (T::one() - r * r * inv_var) * scale;
                        }
                    }
                    acc(&mut g, *pred, d);
                }
                Op::BernoulliNll { logits, targets, weight } => {
                    let scale = dy[[0, 0]] * *weight;
                    let l = self.value(*logits);
                    let mut d = Array2::zeros(l.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, 0]] = (sigmoid(l[[i, 0]]) - t) * scale;
                    }
                    acc(&mut g, *logits, d);
                }
                Op::ReparamElbo {
                    pred,
                    eps,
                    grad_logp,
                    weight,
                } => {
                    let scale = dy[[0, 0]] * *weight;
                    let p = self.value(*pred);
                    let mut d = Array2::zeros(p.dim());
                    for (j, (&e, &gl)) in eps.iter().zip(grad_logp).enumerate() {
                        d[[j, 0]] = -gl * scale;
                        if in_clamp(p[[j, 1]]) {
                            let sigma = p[[j, 1]].exp();
                            d[[j, 1]] = (-gl * sigma * e - T::one()) * scale;
                        }
                    }
                    acc(&mut g, *pred, d);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        let shape = self.value(*p).dim();
                        acc(&mut g, *p, Array2::from_elem(shape, dy[[0, 0]]));
                    }
                }
            }
        }
    }
}
