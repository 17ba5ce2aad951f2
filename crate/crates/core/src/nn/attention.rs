//! Line-level summaries of last-layer attention.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenSeq, MASK};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// Masked variables, in declaration order.
    pub rows: Vec<String>,
    /// Statement labels, one per text line.
    pub cols: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("no masked assignments to summarize")]
    NoMasks,
    #[error("attention shape {got:?} does not match {len} tokens")]
    Shape { got: (usize, usize), len: usize },
}

/// For every masked assignment, averages its query row over heads and then
/// over each line's token span.
pub fn attention_line_summary<T: Scalar>(attention: &[Array2<T>], seq: &TokenSeq) -> Result<AttentionSummary, AttentionError> {
    let n = seq.len();
    for a in attention {
        if a.nrows() < n || a.ncols() < n {
            return Err(AttentionError::Shape { got: a.dim(), len: n });
        }
    }
    let cols: Vec<String> = seq
        .lines
        .iter()
        .map(|l| l.slot.as_ref().map_or_else(|| "plate".to_string(), |s| s.to_string()))
        .collect();
    let mut rows = Vec::new();
    let mut matrix = Vec::new();
    let heads = attention.len().max(1) as f64;
    for line in &seq.lines {
        let Some(q) = line.value_pos.filter(|&p| seq.ids[p] == MASK) else { continue };
        let mean_row: Vec<f64> = (0..n).map(|k| attention.iter().map(|a| a[[q, k]].as_f64()).sum::<f64>() / heads).collect();
        let entries = seq
            .lines
            .iter()
            .map(|span| {
                let w = &mean_row[span.start..span.end];
                if w.is_empty() {
                    0.0
                } else {
                    w.iter().sum::<f64>() / w.len() as f64
                }
            })
            .collect();
        rows.push(line.slot.as_ref().map_or_else(String::new, |s| s.to_string()));
        matrix.push(entries);
    }
    if rows.is_empty() {
        return Err(AttentionError::NoMasks);
    }
    Ok(AttentionSummary { rows, cols, matrix })
}

impl AttentionSummary {
    /// Tab-separated table with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("masked");
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
