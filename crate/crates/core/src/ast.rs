//! Program representation: statements, expressions and distributions, plus
//! static validation and dependency-graph extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarName(String);

impl VarName {
    pub fn new(name: impl Into<String>) -> Self {
        VarName(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VarName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for VarName {
    fn from(s: String) -> Self {
        VarName(s)
    }
}

impl From<&str> for VarName {
    fn from(s: &str) -> Self {
        VarName(s.to_string())
    }
}

/// One addressable value in a trace: a top-level variable, or one member of a plate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub name: VarName,
    pub index: Option<usize>,
}

impl Slot {
    pub fn top(name: impl Into<VarName>) -> Self {
        Slot {
            name: name.into(),
            index: None,
        }
    }

    pub fn member(name: impl Into<VarName>, index: usize) -> Self {
        Slot {
            name: name.into(),
            index: Some(index),
        }
    }
}

impl From<VarName> for Slot {
    fn from(name: VarName) -> Self {
        Slot { name, index: None }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]", self.name, i),
            None => write!(f, "{}", self.name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Func {
    Add,
    Mul,
    Sqrt,
    Sigmoid,
    Rosenbrock,
}

impl Func {
    pub const ALL: [Func; 5] = [Func::Add, Func::Mul, Func::Sqrt, Func::Sigmoid, Func::Rosenbrock];

    pub fn arity(self) -> usize {
        match self {
            Func::Sqrt | Func::Sigmoid => 1,
            Func::Add | Func::Mul | Func::Rosenbrock => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Add => "add",
            Func::Mul => "mul",
            Func::Sqrt => "sqrt",
            Func::Sigmoid => "sigmoid",
            Func::Rosenbrock => "rosenbrock",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// `gaussian(mean, std)`
    Gaussian,
    /// `uniform(low, high)`
    Uniform,
    /// `bernoulli(p)`
    Bernoulli,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::Uniform, Family::Bernoulli];

    pub fn arity(self) -> usize {
        match self {
            Family::Gaussian | Family::Uniform => 2,
            Family::Bernoulli => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Uniform => "uniform",
            Family::Bernoulli => "bernoulli",
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// A variable reference. `indexed` marks `name[i]` inside a plate body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarRef {
    pub name: VarName,
    pub indexed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Var(VarRef),
    Call(Func, Vec<Expr>),
    If(Box<Cond>, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(VarRef {
            name: name.into(),
            indexed: false,
        })
    }

    pub fn indexed(name: &str) -> Expr {
        Expr::Var(VarRef {
            name: name.into(),
            indexed: true,
        })
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Expr {
        Expr::Call(f, args)
    }

    pub fn if_else(cond: Cond, then: Expr, otherwise: Expr) -> Expr {
        Expr::If(Box::new(cond), Box::new(then), Box::new(otherwise))
    }

    /// Visits every variable reference in evaluation order.
    pub fn for_each_ref<'a>(&'a self, f: &mut impl FnMut(&'a VarRef)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(r) => f(r),
            Expr::Call(_, args) => args.iter().for_each(|a| a.for_each_ref(f)),
            Expr::If(c, a, b) => {
                c.for_each_expr(&mut |e| e.for_each_ref(f));
                a.for_each_ref(f);
                b.for_each_ref(f);
            }
        }
    }

    fn is_binary_literal(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0 || *c == 1.0)
    }
}

/// Condition of an if-expression. `Or` treats its operands as truthy (nonzero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cond {
    Gt(Expr, Expr),
    Eq(Expr, Expr),
    Or(Expr, Expr),
}

impl Cond {
    pub fn operands(&self) -> (&Expr, &Expr) {
        match self {
            Cond::Gt(a, b) | Cond::Eq(a, b) | Cond::Or(a, b) => (a, b),
        }
    }

    pub fn operands_mut(&mut self) -> (&mut Expr, &mut Expr) {
        match self {
            Cond::Gt(a, b) | Cond::Eq(a, b) | Cond::Or(a, b) => (a, b),
        }
    }

    fn for_each_expr<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        let (a, b) = self.operands();
        f(a);
        f(b);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueType {
    #[default]
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rhs {
    Sample { family: Family, args: Vec<Expr> },
    Det(Expr),
}

impl Rhs {
    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            Rhs::Sample { args, .. } => args.iter().collect(),
            Rhs::Det(e) => vec![e],
        }
    }

    pub fn exprs_mut(&mut self) -> Vec<&mut Expr> {
        match self {
            Rhs::Sample { args, .. } => args.iter_mut().collect(),
            Rhs::Det(e) => vec![e],
        }
    }
}

/// `target ~ family(args)` or `target = expr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assign {
    pub target: VarName,
    pub rhs: Rhs,
    pub value_type: ValueType,
}

impl Assign {
    pub fn sample(target: &str, family: Family, args: Vec<Expr>) -> Self {
        let mut a = Assign {
            target: target.into(),
            rhs: Rhs::Sample { family, args },
            value_type: ValueType::Continuous,
        };
        a.value_type = a.inferred_value_type();
        a
    }

    pub fn det(target: &str, expr: Expr) -> Self {
        let mut a = Assign {
            target: target.into(),
            rhs: Rhs::Det(expr),
            value_type: ValueType::Continuous,
        };
        a.value_type = a.inferred_value_type();
        a
    }

    pub fn is_sample(&self) -> bool {
        matches!(self.rhs, Rhs::Sample { .. })
    }

    pub fn inferred_value_type(&self) -> ValueType {
        match &self.rhs {
            Rhs::Sample {
                family: Family::Bernoulli,
                ..
            } => ValueType::Binary,
            Rhs::Det(Expr::If(_, a, b)) if a.is_binary_literal() && b.is_binary_literal() => {
                ValueType::Binary
            }
            _ => ValueType::Continuous,
        }
    }

    pub fn refs(&self) -> Vec<&VarRef> {
        let mut out = Vec::new();
        for e in self.rhs.exprs() {
            e.for_each_ref(&mut |r| out.push(r));
        }
        out
    }
}

/// `plate(total):` followed by body templates indexed by `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plate {
    pub total: usize,
    pub body: Vec<Statement>,
}

impl Plate {
    /// Body assignments; nested plates (invalid) are skipped.
    pub fn assigns(&self) -> impl Iterator<Item = &Assign> {
        self.body.iter().filter_map(Statement::as_assign)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Statement {
    Assign(Assign),
    Plate(Plate),
}

impl Statement {
    pub fn as_assign(&self) -> Option<&Assign> {
        match self {
            Statement::Assign(a) => Some(a),
            Statement::Plate(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub notes: Option<String>,
    pub statements: Vec<Statement>,
}

impl Program {
    pub fn new(name: impl Into<String>, statements: Vec<Statement>) -> Self {
        Program {
            name: name.into(),
            notes: None,
            statements,
        }
    }

    pub fn plate(&self) -> Option<&Plate> {
        self.statements.iter().find_map(|s| match s {
            Statement::Plate(p) => Some(p),
            _ => None,
        })
    }

    /// Top-level assignments in statement order.
    pub fn top_assigns(&self) -> impl Iterator<Item = &Assign> {
        self.statements.iter().filter_map(Statement::as_assign)
    }

    /// Every declared variable name in declaration order (plate body names included once).
    pub fn declared(&self) -> Vec<VarName> {
        let mut out = Vec::new();
        for s in &self.statements {
            match s {
                Statement::Assign(a) => out.push(a.target.clone()),
                Statement::Plate(p) => out.extend(p.assigns().map(|a| a.target.clone())),
            }
        }
        out
    }

    pub fn assign(&self, name: &VarName) -> Option<&Assign> {
        self.statements.iter().find_map(|s| match s {
            Statement::Assign(a) if &a.target == name => Some(a),
            Statement::Plate(p) => p.assigns().find(|a| &a.target == name),
            _ => None,
        })
    }

    /// Statement instances in rendering order. Plate members appear for each
    /// index in `members` (or the whole range `1..=total` when `None`).
    pub fn instances<'a>(&'a self, members: Option<&[usize]>) -> Vec<(Slot, &'a Assign)> {
        let mut out = Vec::new();
        for s in &self.statements {
            match s {
                Statement::Assign(a) => out.push((Slot::top(a.target.clone()), a)),
                Statement::Plate(p) => {
                    let all: Vec<usize>;
                    let idx = match members {
                        Some(m) => m,
                        None => {
                            all = (1..=p.total).collect();
                            &all
                        }
                    };
                    for &i in idx {
                        for a in p.assigns() {
                            out.push((Slot::member(a.target.clone(), i), a));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn is_in_plate(&self, name: &VarName) -> bool {
        self.plate()
            .is_some_and(|p| p.assigns().any(|a| &a.target == name))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    UndefinedReference,
    Redefinition,
    ArityMismatch,
    NestedPlate,
    MultiplePlates,
    EmptyPlate,
    /// `name[i]` used outside a plate, or a plate variable used without its index.
    BadIndexing,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub variable: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn violation(kind: ViolationKind, var: Option<&VarName>, message: String) -> Violation {
    Violation {
        kind,
        variable: var.map(|v| v.to_string()),
        message,
    }
}

/// Returns every invariant violation; an empty list means the program is valid.
pub fn validate(program: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut defined: BTreeSet<VarName> = BTreeSet::new();
    let mut plate_vars: BTreeSet<VarName> = BTreeSet::new();
    let mut plates = 0;

    let check_assign = |a: &Assign,
                        in_plate: bool,
                        defined: &BTreeSet<VarName>,
                        plate_vars: &BTreeSet<VarName>,
                        out: &mut Vec<Violation>| {
        if let Rhs::Sample { family, args } = &a.rhs {
            if args.len() != family.arity() {
                out.push(violation(
                    ViolationKind::ArityMismatch,
                    Some(&a.target),
                    format!(
                        "arity mismatch: {} takes {} argument(s), got {}",
                        family.name(),
                        family.arity(),
                        args.len()
                    ),
                ));
            }
        }
        for e in a.rhs.exprs() {
            check_calls(e, &a.target, out);
        }
        for r in a.refs() {
            if !defined.contains(&r.name) {
                out.push(violation(
                    ViolationKind::UndefinedReference,
                    Some(&r.name),
                    format!("undefined reference: `{}` used by `{}`", r.name, a.target),
                ));
                continue;
            }
            let is_plate_var = plate_vars.contains(&r.name);
            if r.indexed != is_plate_var || (r.indexed && !in_plate) {
                out.push(violation(
                    ViolationKind::BadIndexing,
                    Some(&r.name),
                    format!("bad indexing of `{}` in `{}`", r.name, a.target),
                ));
            }
        }
    };

    let declare = |name: &VarName, defined: &mut BTreeSet<VarName>, out: &mut Vec<Violation>| {
        if !defined.insert(name.clone()) {
            out.push(violation(
                ViolationKind::Redefinition,
                Some(name),
                format!("redefinition of `{name}`"),
            ));
        }
    };

    for s in &program.statements {
        match s {
            Statement::Assign(a) => {
                check_assign(a, false, &defined, &plate_vars, &mut out);
                declare(&a.target, &mut defined, &mut out);
            }
            Statement::Plate(p) => {
                plates += 1;
                if plates == 2 {
                    out.push(violation(
                        ViolationKind::MultiplePlates,
                        None,
                        "more than one plate".to_string(),
                    ));
                }
                if p.total == 0 || p.body.is_empty() {
                    out.push(violation(
                        ViolationKind::EmptyPlate,
                        None,
                        "plate must have a positive total and a non-empty body".to_string(),
                    ));
                }
                for b in &p.body {
                    match b {
                        Statement::Assign(a) => {
                            check_assign(a, true, &defined, &plate_vars, &mut out);
                            declare(&a.target, &mut defined, &mut out);
                            plate_vars.insert(a.target.clone());
                        }
                        Statement::Plate(_) => out.push(violation(
                            ViolationKind::NestedPlate,
                            None,
                            "nested plate".to_string(),
                        )),
                    }
                }
            }
        }
    }
    out
}

fn check_calls(e: &Expr, owner: &VarName, out: &mut Vec<Violation>) {
    match e {
        Expr::Const(_) | Expr::Var(_) => {}
        Expr::Call(f, args) => {
            if args.len() != f.arity() {
                out.push(violation(
                    ViolationKind::ArityMismatch,
                    Some(owner),
                    format!(
                        "arity mismatch: {} takes {} argument(s), got {}",
                        f.name(),
                        f.arity(),
                        args.len()
                    ),
                ));
            }
            args.iter().for_each(|a| check_calls(a, owner, out));
        }
        Expr::If(c, a, b) => {
            let (x, y) = c.operands();
            for sub in [x, y, a.as_ref(), b.as_ref()] {
                check_calls(sub, owner, out);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DepGraph {
    pub nodes: BTreeSet<VarName>,
    pub edges: BTreeSet<(VarName, VarName)>,
}

impl DepGraph {
    pub fn parents<'a>(&'a self, v: &'a VarName) -> impl Iterator<Item = &'a VarName> + 'a {
        self.edges.iter().filter(move |(_, c)| c == v).map(|(p, _)| p)
    }

    pub fn children<'a>(&'a self, v: &'a VarName) -> impl Iterator<Item = &'a VarName> + 'a {
        self.edges.iter().filter(move |(p, _)| p == v).map(|(_, c)| c)
    }

    /// Kahn's algorithm; `None` if the graph has a cycle.
    pub fn topo_order(&self) -> Option<Vec<VarName>> {
        let mut indeg: BTreeMap<&VarName, usize> = self.nodes.iter().map(|n| (n, 0)).collect();
        for (_, c) in &self.edges {
            *indeg.get_mut(c)? += 1;
        }
        let mut ready: Vec<&VarName> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut order = Vec::new();
        while let Some(n) = ready.pop() {
            order.push(n.clone());
            for c in self.children(n) {
                let d = indeg.get_mut(c)?;
                *d -= 1;
                if *d == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }
}

/// Errors raised by operations that require a valid program.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid program `{program}`: {}", .violations.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
pub struct InvalidProgram {
    pub program: String,
    pub violations: Vec<Violation>,
}

pub fn ensure_valid(program: &Program) -> Result<(), InvalidProgram> {
    let violations = validate(program);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(InvalidProgram {
            program: program.name.clone(),
            violations,
        })
    }
}

pub fn dependency_graph(program: &Program) -> Result<DepGraph, InvalidProgram> {
    ensure_valid(program)?;
    let mut g = DepGraph::default();
    let mut add = |a: &Assign| {
        g.nodes.insert(a.target.clone());
        for r in a.refs() {
            g.edges.insert((r.name.clone(), a.target.clone()));
        }
    };
    for s in &program.statements {
        match s {
            Statement::Assign(a) => add(a),
            Statement::Plate(p) => p.assigns().for_each(&mut add),
        }
    }
    Ok(g)
}

/// Sets `value_type` on every statement from its right-hand side.
pub fn infer_value_types(program: &Program) -> Program {
    let mut p = program.clone();
    fn fix(s: &mut Statement) {
        match s {
            Statement::Assign(a) => a.value_type = a.inferred_value_type(),
            Statement::Plate(p) => p.body.iter_mut().for_each(fix),
        }
    }
    p.statements.iter_mut().for_each(fix);
    p
}
