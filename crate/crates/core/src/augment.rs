//! Program augmentations and rejection-filtered composition.
//!
//! Only top-level statements are augmentation sites; plate bodies are left alone.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ast::{ensure_valid, validate, Assign, Expr, Family, Func, InvalidProgram, Program, Rhs, Statement, VarName};
use crate::exec;
use crate::rng::{self, Rng};
use crate::text::fmt_num;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    FuzzFunction,
    FuzzConstant,
    LineSwap,
    CutAndGlue,
    CreateAndUse,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 5] = [
        AugmentationKind::FuzzFunction,
        AugmentationKind::FuzzConstant,
        AugmentationKind::LineSwap,
        AugmentationKind::CutAndGlue,
        AugmentationKind::CreateAndUse,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KindWeights {
    pub fuzz_function: f64,
    pub fuzz_constant: f64,
    pub line_swap: f64,
    pub cut_and_glue: f64,
    pub create_and_use: f64,
}

impl Default for KindWeights {
    fn default() -> Self {
        KindWeights {
            fuzz_function: 0.2,
            fuzz_constant: 0.2,
            line_swap: 0.2,
            cut_and_glue: 0.2,
            create_and_use: 0.2,
        }
    }
}

impl KindWeights {
    pub fn weight(&self, k: AugmentationKind) -> f64 {
        match k {
            AugmentationKind::FuzzFunction => self.fuzz_function,
            AugmentationKind::FuzzConstant => self.fuzz_constant,
            AugmentationKind::LineSwap => self.line_swap,
            AugmentationKind::CutAndGlue => self.cut_and_glue,
            AugmentationKind::CreateAndUse => self.create_and_use,
        }
    }
}

/// Uniform ranges constants are resampled from, by the slot they occupy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantPriors {
    pub default: (f64, f64),
    pub gaussian_std: (f64, f64),
    pub bernoulli_p: (f64, f64),
}

impl Default for ConstantPriors {
    fn default() -> Self {
        ConstantPriors {
            default: (-10.0, 10.0),
            gaussian_std: (0.5, 10.0),
            bernoulli_p: (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub max_depth: usize,
    pub kind_weights: KindWeights,
    pub constant_prior: ConstantPriors,
    pub trial_executions: usize,
    pub max_rejects: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            max_depth: 5,
            kind_weights: KindWeights::default(),
            constant_prior: ConstantPriors::default(),
            trial_executions: 8,
            max_rejects: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("kind weights must be non-negative and sum to 1 (sum is {0})")]
    Weights(f64),
    #[error("max_depth must be at least 1")]
    Depth,
}

impl AugmentationPolicy {
    pub fn check(&self) -> Result<(), PolicyError> {
        let w: Vec<f64> = AugmentationKind::ALL.iter().map(|k| self.kind_weights.weight(*k)).collect();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| *x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(PolicyError::Weights(sum));
        }
        if self.max_depth == 0 {
            return Err(PolicyError::Depth);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// expression sites

/// Pre-order walk over every expression node of a statement's right-hand
/// side; the flag is true inside if-conditions. Returning `true` from `f`
/// stops the walk.
fn walk_mut(e: &mut Expr, in_cond: bool, depth: usize, f: &mut dyn FnMut(&mut Expr, bool, usize) -> bool) -> bool {
    if f(e, in_cond, depth) {
        return true;
    }
    match e {
        Expr::Const(_) | Expr::Var(_) => false,
        Expr::Call(_, args) => args.iter_mut().any(|a| walk_mut(a, in_cond, depth + 1, f)),
        Expr::If(c, a, b) => {
            let (x, y) = c.operands_mut();
            walk_mut(x, true, depth + 1, f)
                || walk_mut(y, true, depth + 1, f)
                || walk_mut(a, in_cond, depth + 1, f)
                || walk_mut(b, in_cond, depth + 1, f)
        }
    }
}

/// Counts sites matching `pred` in one assignment.
fn count_sites(a: &Assign, pred: &dyn Fn(&Expr, bool) -> bool) -> usize {
    let mut a = a.clone();
    let mut n = 0;
    for e in a.rhs.exprs_mut() {
        walk_mut(e, false, 0, &mut |x, c, _| {
            if pred(x, c) {
                n += 1;
            }
            false
        });
    }
    n
}

/// Applies `edit(node, argument index, is the whole argument)` to the
/// `target`-th site matching `pred`.
fn edit_site(a: &mut Assign, pred: &dyn Fn(&Expr, bool) -> bool, target: usize, edit: &mut dyn FnMut(&mut Expr, usize, bool)) {
    let mut n = 0;
    for (arg, e) in a.rhs.exprs_mut().into_iter().enumerate() {
        let done = walk_mut(e, false, 0, &mut |x, c, depth| {
            if pred(x, c) {
                if n == target {
                    edit(x, arg, depth == 0);
                    return true;
                }
                n += 1;
            }
            false
        });
        if done {
            return;
        }
    }
}

fn top_assign_positions(p: &Program) -> Vec<usize> {
    p.statements
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Statement::Assign(_)))
        .map(|(i, _)| i)
        .collect()
}

fn assign_mut(p: &mut Program, pos: usize) -> &mut Assign {
    match &mut p.statements[pos] {
        Statement::Assign(a) => a,
        Statement::Plate(_) => unreachable!("position refers to an assignment"),
    }
}

fn round6(x: f64) -> f64 {
    fmt_num(x).parse().expect("formatted number parses")
}

// ---------------------------------------------------------------------------
// single augmentations

/// Applies one augmentation at a random legal site. `Ok(None)` means the
/// program has no legal site for this kind.
pub fn apply(program: &Program, kind: AugmentationKind, seed: u64) -> Result<Option<Program>, InvalidProgram> {
    apply_with(program, kind, seed, &ConstantPriors::default())
}

pub fn apply_with(program: &Program, kind: AugmentationKind, seed: u64, priors: &ConstantPriors) -> Result<Option<Program>, InvalidProgram> {
    ensure_valid(program)?;
    let mut rng = rng::stream(seed, "augment-apply", kind as u64);
    let out = match kind {
        AugmentationKind::FuzzFunction => fuzz_function(program, &mut rng),
        AugmentationKind::FuzzConstant => fuzz_constant(program, &mut rng, priors),
        AugmentationKind::LineSwap => line_swap(program, &mut rng),
        AugmentationKind::CutAndGlue => cut_and_glue(program, &mut rng),
        AugmentationKind::CreateAndUse => create_and_use(program, &mut rng, priors),
    };
    Ok(out.map(|mut p| {
        refresh_value_types(&mut p);
        p
    }))
}

fn refresh_value_types(p: &mut Program) {
    for s in &mut p.statements {
        if let Statement::Assign(a) = s {
            a.value_type = a.inferred_value_type();
        }
    }
}

#[derive(Clone, Copy)]
enum Callee {
    F(Func),
    D(Family),
}

fn pool(arity: usize) -> Vec<Callee> {
    Func::ALL
        .iter()
        .filter(|f| f.arity() == arity)
        .map(|f| Callee::F(*f))
        .chain(Family::ALL.iter().filter(|d| d.arity() == arity).map(|d| Callee::D(*d)))
        .collect()
}

fn fuzz_function(program: &Program, rng: &mut Rng) -> Option<Program> {
    let is_call = |e: &Expr, _: bool| matches!(e, Expr::Call(..));
    // Sites: (statement position, None) for a sample's distribution, or
    // (position, Some(k)) for the k-th call node.
    let mut sites: Vec<(usize, Option<usize>)> = Vec::new();
    for pos in top_assign_positions(program) {
        let a = program.statements[pos].as_assign().expect("assignment");
        if a.is_sample() {
            sites.push((pos, None));
        }
        for k in 0..count_sites(a, &is_call) {
            sites.push((pos, Some(k)));
        }
    }
    let &(pos, site) = sites.choose(rng)?;
    let mut out = program.clone();
    let a = assign_mut(&mut out, pos);
    match site {
        None => {
            let Rhs::Sample { family, args } = &a.rhs else { unreachable!() };
            let family = *family;
            let choices: Vec<Callee> = pool(family.arity())
                .into_iter()
                .filter(|c| !matches!(c, Callee::D(d) if *d == family))
                .collect();
            let args = args.clone();
            a.rhs = match *choices.choose(rng)? {
                Callee::F(f) => Rhs::Det(Expr::Call(f, args)),
                Callee::D(d) => Rhs::Sample { family: d, args },
            };
        }
        Some(k) => {
            let top_level = k == 0 && matches!(a.rhs, Rhs::Det(Expr::Call(..)));
            let mut replacement: Option<Rhs> = None;
            edit_site(a, &is_call, k, &mut |e, _, _| {
                let Expr::Call(f, args) = e else { unreachable!() };
                let f0 = *f;
                let choices: Vec<Callee> = pool(f0.arity())
                    .into_iter()
                    .filter(|c| match c {
                        Callee::F(g) => *g != f0,
                        Callee::D(_) => top_level,
                    })
                    .collect();
                match choices.choose(rng) {
                    Some(Callee::F(g)) => *f = *g,
                    Some(Callee::D(d)) => {
                        replacement = Some(Rhs::Sample {
                            family: *d,
                            args: args.clone(),
                        })
                    }
                    None => {}
                }
            });
            if let Some(r) = replacement {
                a.rhs = r;
            }
        }
    }
    (out != *program).then_some(out)
}

fn fuzz_constant(program: &Program, rng: &mut Rng, priors: &ConstantPriors) -> Option<Program> {
    let is_const = |e: &Expr, in_cond: bool| matches!(e, Expr::Const(_)) && !in_cond;
    let mut sites = Vec::new();
    for pos in top_assign_positions(program) {
        let a = program.statements[pos].as_assign().expect("assignment");
        for k in 0..count_sites(a, &is_const) {
            sites.push((pos, k));
        }
    }
    let &(pos, k) = sites.choose(rng)?;
    let mut out = program.clone();
    let a = assign_mut(&mut out, pos);
    let family = match &a.rhs {
        Rhs::Sample { family, .. } => Some(*family),
        Rhs::Det(_) => None,
    };
    edit_site(a, &is_const, k, &mut |e, arg, direct| {
        // Only a constant sitting directly in a distribution slot gets that slot's prior.
        let (lo, hi) = match (family, arg, direct) {
            (Some(Family::Gaussian), 1, true) => priors.gaussian_std,
            (Some(Family::Bernoulli), 0, true) => priors.bernoulli_p,
            _ => priors.default,
        };
        *e = Expr::Const(round6(rng.gen_range(lo..hi)));
    });
    (out != *program).then_some(out)
}

fn line_swap(program: &Program, rng: &mut Rng) -> Option<Program> {
    let positions = top_assign_positions(program);
    let mut legal = Vec::new();
    for (x, &i) in positions.iter().enumerate() {
        for &j in &positions[x + 1..] {
            let mut p = program.clone();
            p.statements.swap(i, j);
            if validate(&p).is_empty() {
                legal.push(p);
            }
        }
    }
    legal.choose(rng).cloned()
}

fn cut_and_glue(program: &Program, rng: &mut Rng) -> Option<Program> {
    let is_ref = |e: &Expr, _: bool| matches!(e, Expr::Var(r) if !r.indexed);
    let mut sites = Vec::new();
    let mut earlier: Vec<VarName> = Vec::new();
    for (pos, s) in program.statements.iter().enumerate() {
        match s {
            Statement::Assign(a) => {
                let mut refs = Vec::new();
                for r in a.refs() {
                    if !r.indexed {
                        refs.push(r.name.clone());
                    }
                }
                for (k, name) in refs.iter().enumerate() {
                    let others: Vec<VarName> = earlier.iter().filter(|v| *v != name).cloned().collect();
                    if !others.is_empty() {
                        sites.push((pos, k, others));
                    }
                }
                earlier.push(a.target.clone());
            }
            Statement::Plate(_) => {}
        }
    }
    let (pos, k, others) = sites.choose(rng)?.clone();
    let glue = others.choose(rng)?.clone();
    let mut out = program.clone();
    edit_site(assign_mut(&mut out, pos), &is_ref, k, &mut |e, _, _| {
        if let Expr::Var(r) = e {
            r.name = glue.clone();
        }
    });
    Some(out)
}

fn fresh_name(program: &Program) -> VarName {
    let used: BTreeSet<VarName> = program.declared().into_iter().collect();
    (0..)
        .map(|k| VarName::new(format!("r{k}")))
        .find(|n| !used.contains(n))
        .expect("unbounded supply of names")
}

fn create_and_use(program: &Program, rng: &mut Rng, priors: &ConstantPriors) -> Option<Program> {
    let is_site = |e: &Expr, in_cond: bool| match e {
        Expr::Const(_) => !in_cond,
        Expr::Var(r) => !r.indexed,
        _ => false,
    };
    let mut sites = Vec::new();
    for pos in top_assign_positions(program) {
        let a = program.statements[pos].as_assign().expect("assignment");
        for k in 0..count_sites(a, &is_site) {
            sites.push((pos, k));
        }
    }
    let &(pos, k) = sites.choose(rng)?;
    let name = fresh_name(program);
    let (lo, hi) = priors.default;
    let new = if rng.gen_bool(0.5) {
        Assign::sample(
            name.as_str(),
            Family::Gaussian,
            vec![
                Expr::Const(round6(rng.gen_range(lo..hi))),
                Expr::Const(round6(rng.gen_range(priors.gaussian_std.0..priors.gaussian_std.1))),
            ],
        )
    } else {
        let a = round6(rng.gen_range(lo..hi));
        let b = round6(rng.gen_range(lo..hi));
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Assign::sample(name.as_str(), Family::Uniform, vec![Expr::Const(a), Expr::Const(b)])
    };
    let mut out = program.clone();
    edit_site(assign_mut(&mut out, pos), &is_site, k, &mut |e, _, _| {
        *e = Expr::Var(crate::ast::VarRef {
            name: name.clone(),
            indexed: false,
        });
    });
    out.statements.insert(pos, Statement::Assign(new));
    Some(out)
}

// ---------------------------------------------------------------------------
// composition with rejection

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOutcome {
    pub program: Program,
    /// Kinds applied and accepted, in order.
    pub applied: Vec<AugmentationKind>,
    pub rejects: usize,
    /// True when `max_rejects` ran out and the original program was returned.
    pub fell_back: bool,
}

/// Validates and test-executes a candidate `trials` times.
pub fn accept(candidate: &Program, trials: usize, seed: u64) -> bool {
    if !validate(candidate).is_empty() {
        return false;
    }
    (0..trials).all(|t| exec::run(candidate, rng::derive(seed, "augment-trial", t as u64), None).is_ok())
}

pub fn random_augment(program: &Program, policy: &AugmentationPolicy, seed: u64) -> Program {
    random_augment_traced(program, policy, seed).program
}

pub fn random_augment_traced(program: &Program, policy: &AugmentationPolicy, seed: u64) -> AugmentOutcome {
    let fallback = |rejects| AugmentOutcome {
        program: program.clone(),
        applied: Vec::new(),
        rejects,
        fell_back: true,
    };
    if policy.check().is_err() || !validate(program).is_empty() {
        return fallback(0);
    }
    let mut rng = rng::stream(seed, "augment", 0);
    let depth = rng.gen_range(1..=policy.max_depth);
    let weights: Vec<f64> = AugmentationKind::ALL.iter().map(|k| policy.kind_weights.weight(*k)).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).expect("checked weights");
    let mut current = program.clone();
    let mut applied = Vec::new();
    let mut rejects = 0;
    let mut attempt = 0u64;
    while applied.len() < depth {
        if rejects >= policy.max_rejects {
            return fallback(rejects);
        }
        attempt += 1;
        let kind = AugmentationKind::ALL[rng.sample(&dist)];
        let site_seed = rng::derive(seed, "augment-site", attempt);
        let candidate = match apply_with(&current, kind, site_seed, &policy.constant_prior) {
            Ok(Some(c)) => c,
            _ => {
                rejects += 1;
                continue;
            }
        };
        if accept(&candidate, policy.trial_executions, site_seed) {
            current = candidate;
            applied.push(kind);
        } else {
            rejects += 1;
        }
    }
    current.name = format!("{}+aug", program.name);
    AugmentOutcome {
        program: current,
        applied,
        rejects,
        fell_back: false,
    }
}
