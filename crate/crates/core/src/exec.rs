//! Ancestral sampling and joint-density scoring.

use std::collections::{BTreeMap, BTreeSet};

use num_dual::{Dual64, DualNum};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::ast::{ensure_valid, Assign, Cond, Expr, Family, Func, InvalidProgram, Program, Rhs, Slot, Statement, VarRef};
use crate::rng::{self, Rng};

/// Log of zero density. Kept finite so that sums, variances and acceptance
/// ratios stay total.
pub const LOG_ZERO: f64 = f64::MIN;
pub const DEFAULT_SOFT_DELTA_STD: f64 = 1e-2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlateMinibatch {
    /// 1-based member indices, ascending.
    pub indices: Vec<usize>,
    pub total: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub values: BTreeMap<Slot, f64>,
    pub masked: BTreeSet<Slot>,
    pub plate: Option<PlateMinibatch>,
}

impl Trace {
    pub fn get(&self, slot: &Slot) -> Option<f64> {
        self.values.get(slot).copied()
    }

    /// Same trace with `slots` moved from values to the masked set.
    pub fn mask(&self, slots: &BTreeSet<Slot>) -> Trace {
        let mut t = self.clone();
        for s in slots {
            t.values.remove(s);
            t.masked.insert(s.clone());
        }
        t
    }

    /// Fills masked slots with `fill` and clears their masks.
    pub fn fill(&self, fill: &BTreeMap<Slot, f64>) -> Trace {
        let mut t = self.clone();
        for (s, v) in fill {
            t.masked.remove(s);
            t.values.insert(s.clone(), *v);
        }
        t
    }

    /// Every deterministic value matches recomputation from its parents within 1e-9.
    pub fn is_consistent(&self, program: &Program) -> bool {
        for (slot, a) in program.instances(self.members()) {
            if let Rhs::Det(e) = &a.rhs {
                let Some(v) = self.get(&slot) else { return false };
                let lookup = |r: &VarRef| self.get(&ref_slot(r, slot.index));
                match eval(e, &lookup) {
                    Ok(Some(x)) if (x - v).abs() <= 1e-9 * x.abs().max(1.0) => {}
                    _ => return false,
                }
            }
        }
        true
    }

    pub fn members(&self) -> Option<&[usize]> {
        self.plate.as_ref().map(|p| p.indices.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("domain error at line {line} (`{slot}`): {message}")]
    Domain { line: usize, slot: Slot, message: String },
    #[error("trace has no value for `{0}`")]
    MissingValue(Slot),
    #[error("minibatch size {k} is not in 1..={n}")]
    Minibatch { k: usize, n: usize },
    #[error(transparent)]
    Invalid(#[from] InvalidProgram),
}

pub fn ref_slot(r: &VarRef, index: Option<usize>) -> Slot {
    if r.indexed {
        Slot {
            name: r.name.clone(),
            index,
        }
    } else {
        Slot::top(r.name.clone())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (1 − x)² + 100·(y − x²)²
pub fn rosenbrock<V: DualNum<Primitive = f64> + Copy>(x: V, y: V) -> V {
    let a = V::one() - x;
    let b = y - x * x;
    a * a + b * b * 100.0
}

/// Evaluates an expression. `Ok(None)` means a referenced value is missing;
/// `Err` carries a domain-error message.
pub fn eval<V, F>(e: &Expr, lookup: &F) -> Result<Option<V>, String>
where
    V: DualNum<Primitive = f64> + Copy,
    F: Fn(&VarRef) -> Option<V>,
{
    let v = match e {
        Expr::Const(c) => V::from(*c),
        Expr::Var(r) => match lookup(r) {
            Some(v) => v,
            None => return Ok(None),
        },
        Expr::Call(f, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                match eval(a, lookup)? {
                    Some(v) => vals.push(v),
                    None => return Ok(None),
                }
            }
            if vals.len() != f.arity() {
                return Err(format!("{} takes {} argument(s)", f.name(), f.arity()));
            }
            match f {
                Func::Add => vals[0] + vals[1],
                Func::Mul => vals[0] * vals[1],
                Func::Sqrt => {
                    if vals[0].re() < 0.0 {
                        return Err(format!("sqrt of negative value {}", vals[0].re()));
                    }
                    vals[0].sqrt()
                }
                Func::Sigmoid => (V::one() + (-vals[0]).exp()).recip(),
                Func::Rosenbrock => rosenbrock(vals[0], vals[1]),
            }
        }
        Expr::If(c, a, b) => {
            let (x, y) = c.operands();
            let (Some(x), Some(y)) = (eval::<V, F>(x, lookup)?, eval::<V, F>(y, lookup)?) else {
                return Ok(None);
            };
            let truth = match **c {
                Cond::Gt(..) => x.re() > y.re(),
                Cond::Eq(..) => x.re() == y.re(),
                Cond::Or(..) => x.re() != 0.0 || y.re() != 0.0,
            };
            return eval(if truth { a } else { b }, lookup);
        }
    };
    if !v.re().is_finite() {
        return Err(format!("non-finite value {}", v.re()));
    }
    Ok(Some(v))
}

/// Checks distribution parameters; `Err` describes the violation.
pub fn check_params(family: Family, args: &[f64]) -> Result<(), String> {
    match family {
        Family::Gaussian if args[1] > 0.0 && args[1].is_finite() => Ok(()),
        Family::Gaussian => Err(format!("gaussian std must be positive, got {}", args[1])),
        Family::Uniform if args[0] < args[1] => Ok(()),
        Family::Uniform => Err(format!("uniform needs low < high, got ({}, {})", args[0], args[1])),
        Family::Bernoulli if (0.0..=1.0).contains(&args[0]) => Ok(()),
        Family::Bernoulli => Err(format!("bernoulli p must be in [0, 1], got {}", args[0])),
    }
}

pub fn sample_family(family: Family, args: &[f64], rng: &mut Rng) -> f64 {
    match family {
        Family::Gaussian => {
            let e: f64 = rng.sample(StandardNormal);
            args[0] + args[1] * e
        }
        Family::Uniform => args[0] + (args[1] - args[0]) * rng.gen::<f64>(),
        Family::Bernoulli => {
            if rng.gen::<f64>() < args[0] {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Log density (or mass); `None` for zero density or invalid parameters.
pub fn log_density<V: DualNum<Primitive = f64> + Copy>(family: Family, args: &[V], x: V) -> Option<V> {
    match family {
        Family::Gaussian => {
            let (mean, std) = (args[0], args[1]);
            if !(std.re() > 0.0) {
                return None;
            }
            let z = (x - mean) / std;
            Some(-(z * z) * 0.5 - std.ln() - LN_SQRT_2PI)
        }
        Family::Uniform => {
            let (lo, hi) = (args[0], args[1]);
            if !(lo.re() < hi.re()) || x.re() < lo.re() || x.re() > hi.re() {
                return None;
            }
            Some(-(hi - lo).ln())
        }
        Family::Bernoulli => {
            let p = args[0];
            if !(0.0..=1.0).contains(&p.re()) {
                return None;
            }
            let mass = if x.re() == 1.0 {
                p
            } else if x.re() == 0.0 {
                V::one() - p
            } else {
                return None;
            };
            (mass.re() > 0.0).then(|| mass.ln())
        }
    }
}

/// Line number of each statement instance in the bare program listing.
fn line_numbers(program: &Program) -> BTreeMap<&crate::ast::VarName, usize> {
    let mut out = BTreeMap::new();
    let mut line = 0;
    for s in &program.statements {
        match s {
            Statement::Assign(a) => {
                line += 1;
                out.insert(&a.target, line);
            }
            Statement::Plate(p) => {
                line += 1;
                for a in p.assigns() {
                    line += 1;
                    out.insert(&a.target, line);
                }
            }
        }
    }
    out
}

fn eval_args(a: &Assign, slot: &Slot, values: &BTreeMap<Slot, f64>) -> Result<Vec<f64>, String> {
    let lookup = |r: &VarRef| values.get(&ref_slot(r, slot.index)).copied();
    a.rhs
        .exprs()
        .into_iter()
        .map(|e| eval::<f64, _>(e, &lookup).and_then(|v| v.ok_or_else(|| "undefined reference".to_string())))
        .collect()
}

/// Ancestral sampling. With a plate, `minibatch_k` members are drawn uniformly
/// without replacement and only those are recorded (`None` keeps all of them).
pub fn run(program: &Program, seed: u64, minibatch_k: Option<usize>) -> Result<Trace, ExecError> {
    let mut rng = rng::stream(seed, "exec", 0);
    run_with(program, &mut rng, minibatch_k)
}

pub fn run_with(program: &Program, rng: &mut Rng, minibatch_k: Option<usize>) -> Result<Trace, ExecError> {
    ensure_valid(program)?;
    let mut trace = Trace::default();
    if let Some(p) = program.plate() {
        let k = minibatch_k.unwrap_or(p.total);
        if k == 0 || k > p.total {
            return Err(ExecError::Minibatch { k, n: p.total });
        }
        let mut indices: Vec<usize> = rand::seq::index::sample(rng, p.total, k).into_iter().map(|i| i + 1).collect();
        indices.sort_unstable();
        trace.plate = Some(PlateMinibatch {
            indices,
            total: p.total,
        });
    }
    resample_into(program, &mut trace, rng, &BTreeSet::new())?;
    Ok(trace)
}

/// Re-executes the program keeping the values of `keep` fixed; every other
/// sample statement is drawn afresh and deterministic values are recomputed.
pub fn run_conditioned(program: &Program, base: &Trace, keep: &BTreeSet<Slot>, rng: &mut Rng) -> Result<Trace, ExecError> {
    let mut t = base.clone();
    resample_into(program, &mut t, rng, keep)?;
    Ok(t)
}

fn resample_into(program: &Program, trace: &mut Trace, rng: &mut Rng, keep: &BTreeSet<Slot>) -> Result<(), ExecError> {
    let lines = line_numbers(program);
    let members = trace.plate.as_ref().map(|p| p.indices.clone());
    for (slot, a) in program.instances(members.as_deref()) {
        let line = lines[&a.target];
        let domain = |message: String| ExecError::Domain {
            line,
            slot: slot.clone(),
            message,
        };
        let args = eval_args(a, &slot, &trace.values).map_err(domain)?;
        let v = match &a.rhs {
            Rhs::Sample { family, .. } => {
                check_params(*family, &args).map_err(domain)?;
                if keep.contains(&slot) {
                    trace.get(&slot).ok_or_else(|| ExecError::MissingValue(slot.clone()))?
                } else {
                    sample_family(*family, &args, rng)
                }
            }
            Rhs::Det(_) => args[0],
        };
        trace.masked.remove(&slot);
        trace.values.insert(slot, v);
    }
    Ok(())
}

/// Recomputes every deterministic value from the (sampled) values already in
/// the trace, in statement order.
pub fn recompute_deterministic(program: &Program, trace: &Trace) -> Result<Trace, ExecError> {
    let lines = line_numbers(program);
    let mut t = trace.clone();
    for (slot, a) in program.instances(trace.members()) {
        if let Rhs::Det(_) = a.rhs {
            let args = eval_args(a, &slot, &t.values).map_err(|message| ExecError::Domain {
                line: lines[&a.target],
                slot: slot.clone(),
                message,
            })?;
            t.masked.remove(&slot);
            t.values.insert(slot, args[0]);
        }
    }
    Ok(t)
}

/// Sum of the log densities of the sample statements at `slots` (deterministic
/// slots contribute nothing). Zero density gives [`LOG_ZERO`].
pub fn log_density_at(program: &Program, trace: &Trace, slots: &[Slot]) -> Result<f64, ExecError> {
    let mut total = 0.0;
    for slot in slots {
        let a = program.assign(&slot.name).ok_or_else(|| ExecError::MissingValue(slot.clone()))?;
        let Rhs::Sample { family, .. } = &a.rhs else { continue };
        let x = trace.get(slot).ok_or_else(|| ExecError::MissingValue(slot.clone()))?;
        let lp = eval_args(a, slot, &trace.values).ok().and_then(|args| log_density::<f64>(*family, &args, x));
        match lp {
            Some(v) if v.is_finite() => total += v,
            _ => return Ok(LOG_ZERO),
        }
    }
    Ok(total)
}

/// Out-of-plate and in-plate log-density sums, or `None` at a zero-density point.
pub struct JointTerms<V> {
    pub outside: V,
    pub inside: V,
}

/// Calls `sink(in_plate, term)` for every statement instance's log density.
/// Returns `false` at a zero-density point. A deterministic value missing from
/// the trace is computed from its parents and contributes no term.
fn for_each_term<V, F, G>(program: &Program, members: Option<&[usize]>, value: &F, soft_delta_std: f64, mut sink: G) -> Result<bool, ExecError>
where
    V: DualNum<Primitive = f64> + Copy,
    F: Fn(&Slot) -> Option<V>,
    G: FnMut(bool, V),
{
    let mut computed: BTreeMap<Slot, V> = BTreeMap::new();
    for (slot, a) in program.instances(members) {
        let mut args = Vec::with_capacity(2);
        {
            let lookup = |r: &VarRef| {
                let s = ref_slot(r, slot.index);
                computed.get(&s).copied().or_else(|| value(&s))
            };
            for e in a.rhs.exprs() {
                match eval::<V, _>(e, &lookup) {
                    Ok(Some(v)) => args.push(v),
                    Ok(None) => return Err(ExecError::MissingValue(slot.clone())),
                    // A parameter that cannot be evaluated at this point has zero density.
                    Err(_) => return Ok(false),
                }
            }
        }
        let x = match (value(&slot), &a.rhs) {
            (Some(x), _) => x,
            (None, Rhs::Det(_)) => {
                computed.insert(slot, args[0]);
                continue;
            }
            (None, Rhs::Sample { .. }) => return Err(ExecError::MissingValue(slot.clone())),
        };
        let term = match &a.rhs {
            Rhs::Sample { family, .. } => log_density(*family, &args, x),
            Rhs::Det(_) => log_density(Family::Gaussian, &[args[0], V::from(soft_delta_std)], x),
        };
        let Some(term) = term else { return Ok(false) };
        sink(slot.index.is_some(), term);
    }
    Ok(true)
}

/// Generic scorer behind [`log_joint`], [`log_joint_plated`] and the dual-number gradients.
pub fn joint_terms<V, F>(program: &Program, members: Option<&[usize]>, value: &F, soft_delta_std: f64) -> Result<Option<JointTerms<V>>, ExecError>
where
    V: DualNum<Primitive = f64> + Copy,
    F: Fn(&Slot) -> Option<V>,
{
    let mut outside = V::zero();
    let mut inside = V::zero();
    let nonzero = for_each_term(program, members, value, soft_delta_std, |in_plate, term| {
        if in_plate {
            inside += term;
        } else {
            outside += term;
        }
    })?;
    Ok(nonzero.then_some(JointTerms { outside, inside }))
}

/// The individual log-density terms [`log_joint`] adds up, in statement
/// order; `None` at a zero-density point.
pub fn log_joint_terms(program: &Program, trace: &Trace, soft_delta_std: f64) -> Result<Option<Vec<f64>>, ExecError> {
    let members = members_of(program, trace);
    let mut terms = Vec::new();
    let nonzero = for_each_term::<f64, _, _>(program, members.as_deref(), &|s| trace.get(s), soft_delta_std, |_, t| terms.push(t))?;
    Ok(nonzero.then_some(terms))
}

fn members_of(program: &Program, trace: &Trace) -> Option<Vec<usize>> {
    match (&trace.plate, program.plate()) {
        (Some(mb), _) => Some(mb.indices.clone()),
        (None, Some(p)) => Some((1..=p.total).collect()),
        (None, None) => None,
    }
}

/// Sum of log densities of every recorded statement instance; deterministic
/// statements are scored as a Gaussian of std `soft_delta_std` around their
/// recomputed value. Zero density gives [`LOG_ZERO`].
pub fn log_joint(program: &Program, trace: &Trace, soft_delta_std: f64) -> Result<f64, ExecError> {
    let members = members_of(program, trace);
    let t = joint_terms::<f64, _>(program, members.as_deref(), &|s| trace.get(s), soft_delta_std)?;
    Ok(t.map_or(LOG_ZERO, |t| t.outside + t.inside))
}

/// Like [`log_joint`] but with the in-plate sum scaled by n/k.
pub fn log_joint_plated(program: &Program, trace: &Trace, soft_delta_std: f64) -> Result<f64, ExecError> {
    let members = members_of(program, trace);
    let scale = plate_scale(program, members.as_deref());
    let t = joint_terms::<f64, _>(program, members.as_deref(), &|s| trace.get(s), soft_delta_std)?;
    Ok(t.map_or(LOG_ZERO, |t| t.outside + scale * t.inside))
}

fn plate_scale(program: &Program, members: Option<&[usize]>) -> f64 {
    match (program.plate(), members) {
        (Some(p), Some(m)) if !m.is_empty() => p.total as f64 / m.len() as f64,
        _ => 1.0,
    }
}

/// Log joint and its exact gradient with respect to the values at `wrt`
/// (forward-mode dual numbers, one pass per coordinate).
pub fn log_joint_grad(program: &Program, trace: &Trace, wrt: &[Slot], soft_delta_std: f64, plated: bool) -> Result<(f64, Vec<f64>), ExecError> {
    let members = members_of(program, trace);
    let scale = if plated { plate_scale(program, members.as_deref()) } else { 1.0 };
    let value = log_joint(program, trace, soft_delta_std)?;
    let value = if plated { log_joint_plated(program, trace, soft_delta_std)? } else { value };
    if is_log_zero(value) {
        return Ok((value, vec![0.0; wrt.len()]));
    }
    let mut grad = Vec::with_capacity(wrt.len());
    for target in wrt {
        let lookup = |s: &Slot| {
            trace.get(s).map(|v| {
                let d = Dual64::from_re(v);
                if s == target {
                    d.derivative()
                } else {
                    d
                }
            })
        };
        let t = joint_terms::<Dual64, _>(program, members.as_deref(), &lookup, soft_delta_std)?;
        grad.push(t.map_or(0.0, |t| t.outside.eps + scale * t.inside.eps));
    }
    Ok((value, grad))
}
