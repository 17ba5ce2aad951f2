//! Closed-vocabulary tokenizer with numeric payloads.
//!
//! Numbers become `<num>` carrying their value; variable names are mapped to
//! the pool `v0..v63` in order of first appearance.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::ast::{Slot, VarName};
use crate::text::{fmt_num, lex_line, ParseError, Tok};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM: u32 = 3;
pub const NL: u32 = 4;
pub const VAR_POOL: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 256;

const FIXED: [&str; 31] = [
    "<pad>", "<bos>", "<mask>", "<num>", "<nl>", "~", "=", "->", "(", ")", ",", "[", "]", ":", "+", "*", ">", "==", "if", "else", "or",
    "plate", "i", "gaussian", "uniform", "bernoulli", "add", "mul", "sqrt", "sigmoid", "rosenbrock",
];

/// Token strings indexed by id.
pub fn vocabulary() -> &'static [String] {
    static V: OnceLock<Vec<String>> = OnceLock::new();
    V.get_or_init(|| {
        FIXED
            .iter()
            .map(|s| s.to_string())
            .chain((0..VAR_POOL).map(|k| format!("v{k}")))
            .collect()
    })
}

pub fn vocab_size() -> usize {
    FIXED.len() + VAR_POOL
}

fn id_of(s: &str) -> Option<u32> {
    FIXED.iter().position(|f| *f == s).map(|i| i as u32)
}

pub fn var_id(k: usize) -> u32 {
    (FIXED.len() + k) as u32
}

pub fn is_var(id: u32) -> bool {
    id as usize >= FIXED.len()
}

/// Tokens that may be hidden for the masked-language objective.
pub fn is_symbolic(id: u32) -> bool {
    id > NL
}

/// Token span of one text line (excluding its trailing `<nl>`).
#[derive(Clone, Debug, PartialEq)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
    /// Assigned slot, `None` for a plate header.
    pub slot: Option<Slot>,
    /// Position of the annotation value (`<num>` or `<mask>`), if annotated.
    pub value_pos: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub payloads: Vec<Option<f64>>,
    pub lines: Vec<LineSpan>,
    /// Source name of pool variable `k`.
    pub names: Vec<VarName>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn line_of(&self, slot: &Slot) -> Option<&LineSpan> {
        self.lines.iter().find(|l| l.slot.as_ref() == Some(slot))
    }

    /// Pads with `<pad>` up to `len`.
    pub fn padded(&self, len: usize) -> TokenSeq {
        let mut t = self.clone();
        t.ids.resize(len.max(t.ids.len()), PAD);
        t.payloads.resize(t.ids.len(), None);
        t
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizeError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("more than {VAR_POOL} distinct variable names")]
    PoolExhausted,
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
}

pub fn tokenize(text: &str) -> Result<TokenSeq, TokenizeError> {
    tokenize_max(text, DEFAULT_MAX_LEN)
}

pub fn tokenize_max(text: &str, max_len: usize) -> Result<TokenSeq, TokenizeError> {
    let mut seq = TokenSeq {
        ids: Vec::new(),
        payloads: Vec::new(),
        lines: Vec::new(),
        names: Vec::new(),
    };
    let mut pool: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seq.ids.is_empty() {
            seq.ids.push(NL);
            seq.payloads.push(None);
        }
        let toks = lex_line(raw, lineno + 1)?;
        let start = seq.ids.len();
        let mut value_pos = None;
        let mut after_arrow = false;
        for lx in &toks {
            let (id, payload) = match &lx.tok {
                Tok::Num(v) => (NUM, Some(*v)),
                Tok::Mask => (MASK, None),
                Tok::Ident(s) => match id_of(s) {
                    Some(id) if id > NL => (id, None),
                    _ => {
                        let next = pool.len();
                        let k = *pool.entry(s.clone()).or_insert(next);
                        if k >= VAR_POOL {
                            return Err(TokenizeError::PoolExhausted);
                        }
                        if k == seq.names.len() {
                            seq.names.push(VarName::new(s.clone()));
                        }
                        (var_id(k), None)
                    }
                },
                other => {
                    let s = match other {
                        Tok::Tilde => "~",
                        Tok::Assign => "=",
                        Tok::EqEq => "==",
                        Tok::Arrow => "->",
                        Tok::LParen => "(",
                        Tok::RParen => ")",
                        Tok::Comma => ",",
                        Tok::LBracket => "[",
                        Tok::RBracket => "]",
                        Tok::Colon => ":",
                        Tok::Plus => "+",
                        Tok::Star => "*",
                        Tok::Gt => ">",
                        _ => unreachable!(),
                    };
                    (id_of(s).ok_or_else(|| TokenizeError::UnknownSymbol(s.into()))?, None)
                }
            };
            if after_arrow {
                value_pos = Some(seq.ids.len());
                after_arrow = false;
            }
            if matches!(lx.tok, Tok::Arrow) {
                after_arrow = true;
            }
            seq.ids.push(id);
            seq.payloads.push(payload);
        }
        let end = seq.ids.len();
        let slot = line_slot(&toks);
        seq.lines.push(LineSpan { start, end, slot, value_pos });
    }
    if seq.ids.len() > max_len {
        return Err(TokenizeError::TooLong {
            len: seq.ids.len(),
            max: max_len,
        });
    }
    Ok(seq)
}

fn line_slot(toks: &[crate::text::Lexeme]) -> Option<Slot> {
    let name = match toks.first().map(|l| &l.tok) {
        Some(Tok::Ident(s)) if s != "plate" => s.clone(),
        _ => return None,
    };
    match (toks.get(1).map(|l| &l.tok), toks.get(2).map(|l| &l.tok)) {
        (Some(Tok::LBracket), Some(Tok::Num(k))) => Some(Slot::member(name, *k as usize)),
        _ => Some(Slot::top(name)),
    }
}

fn token_str(seq: &TokenSeq, pos: usize) -> String {
    let id = seq.ids[pos];
    if id == NUM {
        return fmt_num(seq.payloads[pos].unwrap_or(f64::NAN));
    }
    if is_var(id) {
        let k = id as usize - FIXED.len();
        return seq.names.get(k).map_or_else(|| format!("v{k}"), |n| n.to_string());
    }
    FIXED[id as usize].to_string()
}

/// Inverse of [`tokenize`] on canonical text.
pub fn detokenize(seq: &TokenSeq) -> String {
    let mut out = String::new();
    let mut in_plate = false;
    let mut line_start = true;
    let mut prev: Option<u32> = None;
    let open_paren = id_of("(").unwrap();
    let open_br = id_of("[").unwrap();
    let no_space_before: Vec<u32> = [")", "]", ",", ":", "["].iter().map(|s| id_of(s).unwrap()).collect();
    let callers: Vec<u32> = ["gaussian", "uniform", "bernoulli", "add", "mul", "sqrt", "sigmoid", "rosenbrock", "plate"]
        .iter()
        .map(|s| id_of(s).unwrap())
        .collect();
    let plate = id_of("plate").unwrap();
    for pos in 0..seq.ids.len() {
        let id = seq.ids[pos];
        if id == PAD {
            break;
        }
        if id == NL {
            out.push('\n');
            line_start = true;
            prev = None;
            continue;
        }
        if line_start {
            if id == plate {
                in_plate = true;
            } else if in_plate && seq.ids.get(pos + 1) == Some(&open_br) {
                out.push_str("  ");
            } else {
                in_plate = false;
            }
            line_start = false;
        } else if let Some(p) = prev {
            let tight = no_space_before.contains(&id) || p == open_paren || p == open_br || (id == open_paren && callers.contains(&p));
            if !tight {
                out.push(' ');
            }
        }
        out.push_str(&token_str(seq, pos));
        prev = Some(id);
    }
    out.push('\n');
    out
}
