//! Concrete text grammar for programs and annotated traces.
//!
//! ```text
//! mu ~ uniform(-5, 5) -> 1.25
//! z ~ gaussian(mu, 2) -> <mask>
//! w = z * 2 + 1 -> 3.5
//! plate(10):
//!   d[1] ~ gaussian(z, 1) -> 0.3
//!   d[4] ~ gaussian(z, 1) -> -1.1
//! ```
//!
//! Numbers are printed with six significant digits and never in scientific
//! notation. `add`/`mul` render infix; every other function renders as a call.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ast::{Assign, Cond, Expr, Family, Func, Plate, Program, Rhs, Slot, Statement, VarName, VarRef};
use crate::exec::{PlateMinibatch, Trace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown function or distribution `{name}` at line {line}, column {column}")]
    UnknownName {
        line: usize,
        column: usize,
        name: String,
    },
    #[error("malformed number `{text}` at line {line}, column {column}")]
    MalformedNumber {
        line: usize,
        column: usize,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("trace has no value for unmasked `{0}`")]
    MissingValue(Slot),
    #[error("value of `{slot}` is not finite ({value})")]
    NonFinite { slot: Slot, value: f64 },
}

/// Formats a number with six significant digits and no exponent.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let s = format!("{v:.5e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let point = exp + 1;
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if point <= 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-point) as usize));
        out.push_str(&digits);
    } else if point as usize >= digits.len() {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', point as usize - digits.len()));
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    if out.contains('.') {
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// lexing

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Num(f64),
    Tilde,
    Assign,
    EqEq,
    Arrow,
    LParen,
    RParen,
    Comma,
    LBracket,
    RBracket,
    Colon,
    Plus,
    Star,
    Gt,
    Mask,
}

#[derive(Clone, Debug)]
pub(crate) struct Lexeme {
    pub tok: Tok,
    pub col: usize,
}

pub(crate) fn lex_line(src: &str, line: usize) -> Result<Vec<Lexeme>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '~' => Some(Tok::Tilde),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ':' => Some(Tok::Colon),
            '+' => Some(Tok::Plus),
            '*' => Some(Tok::Star),
            '>' => Some(Tok::Gt),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Lexeme { tok, col });
            i += 1;
            continue;
        }
        if c == '=' {
            if bytes.get(i + 1) == Some(&b'=') {
                out.push(Lexeme { tok: Tok::EqEq, col });
                i += 2;
            } else {
                out.push(Lexeme { tok: Tok::Assign, col });
                i += 1;
            }
            continue;
        }
        if src[i..].starts_with("<mask>") {
            out.push(Lexeme { tok: Tok::Mask, col });
            i += "<mask>".len();
            continue;
        }
        if c == '-' && bytes.get(i + 1) == Some(&b'>') {
            out.push(Lexeme { tok: Tok::Arrow, col });
            i += 2;
            continue;
        }
        if c == '-' || c == '.' || c.is_ascii_digit() {
            let start = i;
            i += 1;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                i += 1;
            }
            let text = &src[start..i];
            let well_formed = {
                let body = text.strip_prefix('-').unwrap_or(text);
                let (int, frac) = match body.split_once('.') {
                    Some((a, b)) => (a, Some(b)),
                    None => (body, None),
                };
                !int.is_empty()
                    && int.bytes().all(|b| b.is_ascii_digit())
                    && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
            };
            match text.parse::<f64>() {
                Ok(v) if well_formed => out.push(Lexeme { tok: Tok::Num(v), col }),
                _ => {
                    return Err(ParseError::MalformedNumber {
                        line,
                        column: col,
                        text: text.to_string(),
                    })
                }
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Lexeme {
                tok: Tok::Ident(src[start..i].to_string()),
                col,
            });
            continue;
        }
        return Err(ParseError::Syntax {
            line,
            column: col,
            message: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

const KEYWORDS: [&str; 4] = ["if", "else", "or", "plate"];

// ---------------------------------------------------------------------------
// parsing

/// Index written in brackets: the template variable `i` or a concrete member index.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Index {
    Template,
    At(usize),
}

struct LineParser<'a> {
    toks: &'a [Lexeme],
    pos: usize,
    line: usize,
    eol_col: usize,
    /// Concrete index seen in this line's brackets, if any.
    index_seen: Option<Index>,
}

/// One parsed statement line.
struct ParsedLine {
    target: VarName,
    target_index: Option<Index>,
    rhs: Rhs,
    annotation: Option<Annotation>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Annotation {
    Value(f64),
    Masked,
}

impl<'a> LineParser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|l| &l.tok)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.eol_col, |l| l.col)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.line,
            column: self.col(),
            message: message.into(),
        }
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|l| l.tok.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if !KEYWORDS.contains(&s.as_str()) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err("expected identifier")),
        }
    }

    fn index(&mut self) -> Result<Index, ParseError> {
        self.expect(Tok::LBracket, "`[`")?;
        let idx = match self.bump() {
            Some(Tok::Ident(s)) if s == "i" => Index::Template,
            Some(Tok::Num(v)) if v >= 0.0 && v.fract() == 0.0 => Index::At(v as usize),
            _ => {
                self.pos -= 1;
                return Err(self.err("expected plate index"));
            }
        };
        self.expect(Tok::RBracket, "`]`")?;
        match self.index_seen {
            Some(prev) if prev != idx => return Err(self.err("inconsistent plate index in line")),
            _ => self.index_seen = Some(idx),
        }
        Ok(idx)
    }

    fn statement(&mut self) -> Result<ParsedLine, ParseError> {
        let target: VarName = self.ident()?.into();
        let target_index = if self.peek() == Some(&Tok::LBracket) {
            Some(self.index()?)
        } else {
            None
        };
        let rhs = match self.peek() {
            Some(Tok::Tilde) => {
                self.pos += 1;
                let col = self.col();
                let name = self.ident()?;
                let family = Family::from_name(&name).ok_or(ParseError::UnknownName {
                    line: self.line,
                    column: col,
                    name,
                })?;
                let args = self.call_args()?;
                Rhs::Sample { family, args }
            }
            Some(Tok::Assign) => {
                self.pos += 1;
                Rhs::Det(self.expr()?)
            }
            _ => return Err(self.err("expected `~` or `=`")),
        };
        let annotation = if self.peek() == Some(&Tok::Arrow) {
            self.pos += 1;
            match self.bump() {
                Some(Tok::Num(v)) => Some(Annotation::Value(v)),
                Some(Tok::Mask) => Some(Annotation::Masked),
                _ => {
                    self.pos -= 1;
                    return Err(self.err("expected value or `<mask>` after `->`"));
                }
            }
        } else {
            None
        };
        if self.pos < self.toks.len() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(ParsedLine {
            target,
            target_index,
            rhs,
            annotation,
        })
    }

    fn call_args(&mut self) -> Result<Vec<Expr>, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.peek() != Some(&Tok::RParen) {
            loop {
                args.push(self.expr()?);
                if self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(args)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while self.peek() == Some(&Tok::Plus) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Call(Func::Add, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.atom()?;
        while self.peek() == Some(&Tok::Star) {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Expr::Call(Func::Mul, vec![lhs, rhs]);
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let col = self.col();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(s)) if s == "if" => {
                self.pos += 1;
                self.expect(Tok::LParen, "`(` after `if`")?;
                let a = self.expr()?;
                let op = self.bump();
                let b = self.expr()?;
                let cond = match op {
                    Some(Tok::Gt) => Cond::Gt(a, b),
                    Some(Tok::EqEq) => Cond::Eq(a, b),
                    Some(Tok::Ident(o)) if o == "or" => Cond::Or(a, b),
                    _ => {
                        return Err(ParseError::Syntax {
                            line: self.line,
                            column: col,
                            message: "expected `>`, `==` or `or` in condition".into(),
                        })
                    }
                };
                self.expect(Tok::RParen, "`)` after condition")?;
                let then = self.atom()?;
                match self.bump() {
                    Some(Tok::Ident(e)) if e == "else" => {}
                    _ => {
                        self.pos -= 1;
                        return Err(self.err("expected `else`"));
                    }
                }
                let otherwise = self.atom()?;
                Ok(Expr::if_else(cond, then, otherwise))
            }
            Some(Tok::Ident(s)) if !KEYWORDS.contains(&s.as_str()) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    let f = Func::from_name(&s).ok_or(ParseError::UnknownName {
                        line: self.line,
                        column: col,
                        name: s.clone(),
                    })?;
                    let args = self.call_args()?;
                    Ok(Expr::Call(f, args))
                } else if self.peek() == Some(&Tok::LBracket) {
                    self.index()?;
                    Ok(Expr::Var(VarRef {
                        name: s.into(),
                        indexed: true,
                    }))
                } else {
                    Ok(Expr::Var(VarRef {
                        name: s.into(),
                        indexed: false,
                    }))
                }
            }
            _ => Err(self.err("expected expression")),
        }
    }
}

/// A parsed program together with whatever annotations the text carried.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub program: Program,
    pub trace: Trace,
}

/// Parses one program (annotated or not). Lines starting with `#` are comments;
/// `# program: <name>` sets the program name.
pub fn parse(text: &str) -> Result<Parsed, ParseError> {
    let mut name = String::from("anonymous");
    let mut statements: Vec<Statement> = Vec::new();
    let mut trace = Trace::default();
    let mut open: Option<OpenPlate> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("program:") {
                name = n.trim().to_string();
            }
            continue;
        }
        let indent = raw.len() - raw.trim_start().len();
        let toks = lex_line(raw, line)?;

        if open.as_ref().is_some_and(|p| indent <= p.indent) {
            let p = open.take().expect("open plate");
            statements.push(p.close(&mut trace)?);
        }

        let mut lp = LineParser {
            toks: &toks,
            pos: 0,
            line,
            eol_col: raw.len() + 1,
            index_seen: None,
        };

        if matches!(toks.first(), Some(Lexeme { tok: Tok::Ident(s), .. }) if s == "plate") {
            lp.pos = 1;
            lp.expect(Tok::LParen, "`(` after `plate`")?;
            let total = match lp.bump() {
                Some(Tok::Num(v)) if v >= 1.0 && v.fract() == 0.0 => v as usize,
                _ => {
                    lp.pos -= 1;
                    return Err(lp.err("plate size must be a positive integer"));
                }
            };
            lp.expect(Tok::RParen, "`)`")?;
            lp.expect(Tok::Colon, "`:`")?;
            if lp.pos < toks.len() {
                return Err(lp.err("unexpected trailing input"));
            }
            match open.as_mut() {
                // Kept so that validation can report the nesting.
                Some(p) => p.nested.push(Statement::Plate(Plate {
                    total,
                    body: Vec::new(),
                })),
                None => {
                    open = Some(OpenPlate {
                        indent,
                        total,
                        line,
                        lines: Vec::new(),
                        nested: Vec::new(),
                    })
                }
            }
            continue;
        }

        let pl = lp.statement()?;
        match open.as_mut() {
            None => {
                if pl.target_index.is_some() {
                    return Err(ParseError::Syntax {
                        line,
                        column: indent + 1,
                        message: "indexed target outside a plate".into(),
                    });
                }
                record_annotation(&mut trace, Slot::top(pl.target.clone()), pl.annotation);
                statements.push(Statement::Assign(make_assign(pl.target, pl.rhs)));
            }
            Some(p) => p.lines.push((line, indent, pl)),
        }
    }
    if let Some(p) = open.take() {
        statements.push(p.close(&mut trace)?);
    }
    Ok(Parsed {
        program: Program {
            name,
            notes: None,
            statements,
        },
        trace,
    })
}

fn make_assign(target: VarName, rhs: Rhs) -> Assign {
    let mut a = Assign {
        target,
        rhs,
        value_type: Default::default(),
    };
    a.value_type = a.inferred_value_type();
    a
}

struct OpenPlate {
    indent: usize,
    total: usize,
    line: usize,
    lines: Vec<(usize, usize, ParsedLine)>,
    nested: Vec<Statement>,
}

impl OpenPlate {
    /// Template lines (`d[i]`) become the body directly. Member lines (`d[4]`)
    /// are grouped by index; the first group is the body and every other group
    /// must repeat it exactly.
    fn close(self, trace: &mut Trace) -> Result<Statement, ParseError> {
        let err = |line: usize, column: usize, message: &str| ParseError::Syntax {
            line,
            column,
            message: message.to_string(),
        };
        if self.lines.is_empty() && self.nested.is_empty() {
            return Err(err(self.line, 1, "plate has no body"));
        }
        let concrete = matches!(self.lines.first(), Some((_, _, l)) if matches!(l.target_index, Some(Index::At(_))));
        let mut body: Vec<Statement> = Vec::new();
        if !concrete {
            for (line, indent, l) in self.lines {
                match l.target_index {
                    Some(Index::Template) => {}
                    Some(Index::At(_)) => return Err(err(line, indent + 1, "cannot mix template and member lines")),
                    None => return Err(err(line, indent + 1, "plate body targets must be indexed")),
                }
                if l.annotation.is_some() {
                    return Err(err(line, indent + 1, "template lines cannot be annotated"));
                }
                body.push(Statement::Assign(make_assign(l.target, l.rhs)));
            }
        } else {
            let mut members: Vec<usize> = Vec::new();
            let mut template: Vec<(VarName, Rhs)> = Vec::new();
            let mut cursor = 0;
            for (line, indent, l) in self.lines {
                let k = match l.target_index {
                    Some(Index::At(k)) => k,
                    Some(Index::Template) => return Err(err(line, indent + 1, "cannot mix template and member lines")),
                    None => return Err(err(line, indent + 1, "plate body targets must be indexed")),
                };
                if k == 0 || k > self.total {
                    return Err(err(line, indent + 1, "plate index out of range"));
                }
                if members.last() != Some(&k) {
                    if members.contains(&k) {
                        return Err(err(line, indent + 1, "duplicate plate member"));
                    }
                    if members.len() > 1 && cursor != template.len() {
                        return Err(err(line, indent + 1, "incomplete plate member"));
                    }
                    members.push(k);
                    cursor = 0;
                }
                if members.len() == 1 {
                    template.push((l.target.clone(), l.rhs));
                } else {
                    match template.get(cursor) {
                        Some((t, r)) if *t == l.target && *r == l.rhs => cursor += 1,
                        _ => {
                            return Err(err(
                                line,
                                indent + 1,
                                "plate member does not match the first member's template",
                            ))
                        }
                    }
                }
                record_annotation(trace, Slot::member(l.target, k), l.annotation);
            }
            if members.len() > 1 && cursor != template.len() {
                return Err(err(self.line, 1, "incomplete plate member"));
            }
            body.extend(template.into_iter().map(|(t, r)| Statement::Assign(make_assign(t, r))));
            trace.plate = Some(PlateMinibatch {
                indices: members,
                total: self.total,
            });
        }
        body.extend(self.nested);
        Ok(Statement::Plate(Plate { total: self.total, body }))
    }
}

fn record_annotation(trace: &mut Trace, slot: Slot, ann: Option<Annotation>) {
    match ann {
        Some(Annotation::Value(v)) => {
            trace.values.insert(slot, v);
        }
        Some(Annotation::Masked) => {
            trace.masked.insert(slot);
        }
        None => {}
    }
}

/// Parses text that must be a bare program listing (annotations are ignored).
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    parse(text).map(|p| p.program)
}

/// Splits a multi-program corpus on `---` separator lines and parses each block.
pub fn parse_many(text: &str) -> Result<Vec<Parsed>, ParseError> {
    let mut blocks = Vec::new();
    let mut current = String::new();
    let mut offset = 0;
    let mut block_start = 0;
    for line in text.lines() {
        if line.trim() == "---" {
            if !current.trim().is_empty() {
                blocks.push((block_start, std::mem::take(&mut current)));
            }
            current.clear();
            block_start = offset + 1;
        } else {
            current.push_str(line);
            current.push('\n');
        }
        offset += 1;
    }
    if !current.trim().is_empty() {
        blocks.push((block_start, current));
    }
    blocks
        .into_iter()
        .map(|(start, b)| parse(&b).map_err(|e| shift_line(e, start)))
        .collect()
}

fn shift_line(e: ParseError, by: usize) -> ParseError {
    match e {
        ParseError::Syntax { line, column, message } => ParseError::Syntax {
            line: line + by,
            column,
            message,
        },
        ParseError::UnknownName { line, column, name } => ParseError::UnknownName {
            line: line + by,
            column,
            name,
        },
        ParseError::MalformedNumber { line, column, text } => ParseError::MalformedNumber {
            line: line + by,
            column,
            text,
        },
    }
}

// ---------------------------------------------------------------------------
// rendering

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Prec {
    Top,
    Sum,
    Product,
    Atom,
}

fn write_ref(out: &mut String, r: &VarRef, index: Option<usize>) {
    out.push_str(r.name.as_str());
    if r.indexed {
        match index {
            Some(i) => {
                let _ = write!(out, "[{i}]");
            }
            None => out.push_str("[i]"),
        }
    }
}

fn write_expr(out: &mut String, e: &Expr, index: Option<usize>, ctx: Prec) {
    match e {
        Expr::Const(v) => out.push_str(&fmt_num(*v)),
        Expr::Var(r) => write_ref(out, r, index),
        Expr::Call(Func::Add, args) if args.len() == 2 => {
            let paren = ctx > Prec::Sum;
            if paren {
                out.push('(');
            }
            write_expr(out, &args[0], index, Prec::Sum);
            out.push_str(" + ");
            write_expr(out, &args[1], index, Prec::Product);
            if paren {
                out.push(')');
            }
        }
        Expr::Call(Func::Mul, args) if args.len() == 2 => {
            let paren = ctx > Prec::Product;
            if paren {
                out.push('(');
            }
            write_expr(out, &args[0], index, Prec::Product);
            out.push_str(" * ");
            write_expr(out, &args[1], index, Prec::Atom);
            if paren {
                out.push(')');
            }
        }
        Expr::Call(f, args) => {
            out.push_str(f.name());
            write_args(out, args, index);
        }
        Expr::If(c, a, b) => {
            let paren = ctx > Prec::Top;
            if paren {
                out.push('(');
            }
            out.push_str("if (");
            let (x, y) = c.operands();
            write_expr(out, x, index, Prec::Top);
            out.push_str(match **c {
                Cond::Gt(..) => " > ",
                Cond::Eq(..) => " == ",
                Cond::Or(..) => " or ",
            });
            write_expr(out, y, index, Prec::Top);
            out.push_str(") ");
            write_expr(out, a, index, Prec::Atom);
            out.push_str(" else ");
            write_expr(out, b, index, Prec::Atom);
            if paren {
                out.push(')');
            }
        }
    }
}

fn write_args(out: &mut String, args: &[Expr], index: Option<usize>) {
    out.push('(');
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write_expr(out, a, index, Prec::Top);
    }
    out.push(')');
}

/// Renders the statement part of a line (no indentation, no annotation).
pub fn render_statement(a: &Assign, index: Option<usize>, in_plate: bool) -> String {
    let mut out = String::new();
    out.push_str(a.target.as_str());
    if in_plate {
        match index {
            Some(i) => {
                let _ = write!(out, "[{i}]");
            }
            None => out.push_str("[i]"),
        }
    }
    match &a.rhs {
        Rhs::Sample { family, args } => {
            out.push_str(" ~ ");
            out.push_str(family.name());
            write_args(&mut out, args, index);
        }
        Rhs::Det(e) => {
            out.push_str(" = ");
            write_expr(&mut out, e, index, Prec::Top);
        }
    }
    out
}

pub fn render_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, None, Prec::Top);
    out
}

/// Renders a bare program listing (plate bodies as `[i]` templates).
pub fn render_program(program: &Program) -> String {
    let mut out = String::new();
    for s in &program.statements {
        match s {
            Statement::Assign(a) => {
                out.push_str(&render_statement(a, None, false));
                out.push('\n');
            }
            Statement::Plate(p) => {
                let _ = writeln!(out, "plate({}):", p.total);
                for a in p.assigns() {
                    out.push_str("  ");
                    out.push_str(&render_statement(a, None, true));
                    out.push('\n');
                }
            }
        }
    }
    out
}

/// Canonical annotated text. Plate members shown are the trace's minibatch
/// (every member when the trace has none).
pub fn render(program: &Program, trace: &Trace, masks: &BTreeSet<Slot>) -> Result<String, RenderError> {
    let mut out = String::new();
    let annotate = |out: &mut String, slot: Slot| -> Result<(), RenderError> {
        out.push_str(" -> ");
        if masks.contains(&slot) {
            out.push_str("<mask>");
            return Ok(());
        }
        let v = *trace.values.get(&slot).ok_or_else(|| RenderError::MissingValue(slot.clone()))?;
        if !v.is_finite() {
            return Err(RenderError::NonFinite { slot, value: v });
        }
        out.push_str(&fmt_num(v));
        Ok(())
    };
    for s in &program.statements {
        match s {
            Statement::Assign(a) => {
                out.push_str(&render_statement(a, None, false));
                annotate(&mut out, Slot::top(a.target.clone()))?;
                out.push('\n');
            }
            Statement::Plate(p) => {
                let _ = writeln!(out, "plate({}):", p.total);
                let all: Vec<usize>;
                let members = match &trace.plate {
                    Some(mb) => &mb.indices,
                    None => {
                        all = (1..=p.total).collect();
                        &all
                    }
                };
                for &i in members {
                    for a in p.assigns() {
                        out.push_str("  ");
                        out.push_str(&render_statement(a, Some(i), true));
                        annotate(&mut out, Slot::member(a.target.clone(), i))?;
                        out.push('\n');
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`render`] with the trace's own mask set.
pub fn render_trace(program: &Program, trace: &Trace) -> Result<String, RenderError> {
    render(program, trace, &trace.masked)
}
