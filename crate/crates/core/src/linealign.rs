//! Line splitting and per-batch line/token alignment.
//!
//! A batch of `b` snippets becomes a `[b, k, p]` id array: every snippet is
//! cut or padded to `k` lines and every line to `p` tokens, where slot 0 of a
//! real line is `[CLS]`. Padding lines are all `[PAD]` with a zero line mask.

use serde::{Deserialize, Serialize};

use crate::error::{CslsError, Result};
use crate::tokenize::{encode_ids, Tokenizer};

pub const DEFAULT_K_CAP: usize = 100;
pub const DEFAULT_P: usize = 20;

/// Split on `\n`. Indentation and interior spacing stay in the line; the
/// terminating `\n` (and a preceding `\r`) do not. Blank lines are kept, and
/// a final newline does not open an extra empty line.
pub fn split_lines(code: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = code
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    if code.is_empty() || code.ends_with('\n') {
        lines.pop();
    }
    lines
}

/// How the line count `k` of a batch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// `k = min(longest snippet in the batch, k_cap)`.
    #[default]
    PerBatch,
    /// `k = k_cap` regardless of the batch, so rows do not depend on batch companions.
    PadToCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineTokenBatch {
    pub b: usize,
    pub k: usize,
    pub p: usize,
    /// `[b, k, p]`, row-major.
    pub tokens: Vec<u32>,
    /// `[b, k, p]`.
    pub token_mask: Vec<u8>,
    /// `[b, k]`.
    pub line_mask: Vec<u8>,
    /// Lines in each source snippet before alignment.
    pub source_lines: Vec<usize>,
    /// Per snippet, one flag per kept line: whether its content was cut to fit `p`.
    pub line_truncated: Vec<Vec<bool>>,
}

impl LineTokenBatch {
    pub fn line(&self, snippet: usize, line: usize) -> &[u32] {
        let off = (snippet * self.k + line) * self.p;
        &self.tokens[off..off + self.p]
    }

    pub fn line_token_mask(&self, snippet: usize, line: usize) -> &[u8] {
        let off = (snippet * self.k + line) * self.p;
        &self.token_mask[off..off + self.p]
    }

    pub fn is_real(&self, snippet: usize, line: usize) -> bool {
        self.line_mask[snippet * self.k + line] == 1
    }

    pub fn real_lines(&self, snippet: usize) -> usize {
        self.line_mask[snippet * self.k..(snippet + 1) * self.k]
            .iter()
            .filter(|&&m| m == 1)
            .count()
    }

    /// Per-snippet audit records (one per snippet, in batch order).
    pub fn debug_records(&self, ids: &[u64]) -> Vec<LineDebugRecord> {
        (0..self.b)
            .map(|i| LineDebugRecord {
                id: ids.get(i).copied().unwrap_or(i as u64),
                k: self.k,
                p: self.p,
                source_lines: self.source_lines[i],
                real_lines: self.real_lines(i),
                line_truncated: self.line_truncated[i].clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDebugRecord {
    pub id: u64,
    pub k: usize,
    pub p: usize,
    pub source_lines: usize,
    pub real_lines: usize,
    pub line_truncated: Vec<bool>,
}

/// Build an aligned `[b, k, p]` batch from per-snippet line lists.
pub fn align_batch<T, S>(
    line_lists: &[Vec<S>],
    k_cap: usize,
    p: usize,
    tok: &T,
    mode: AlignMode,
) -> Result<LineTokenBatch>
where
    T: Tokenizer + ?Sized,
    S: AsRef<str>,
{
    if line_lists.is_empty() {
        return Err(CslsError::Empty("line batch"));
    }
    if k_cap == 0 {
        return Err(CslsError::InvalidArgument(
            "k_cap must be at least 1".into(),
        ));
    }
    if p < 2 {
        return Err(CslsError::InvalidArgument(format!(
            "p must be at least 2, got {p}"
        )));
    }
    if let Some(i) = line_lists.iter().position(|l| l.is_empty()) {
        return Err(CslsError::NoRealLines(i));
    }
    let b = line_lists.len();
    let k = match mode {
        AlignMode::PerBatch => line_lists
            .iter()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
            .min(k_cap),
        AlignMode::PadToCap => k_cap,
    };
    let mut tokens = vec![tok.pad_id(); b * k * p];
    let mut token_mask = vec![0u8; b * k * p];
    let mut line_mask = vec![0u8; b * k];
    let mut line_truncated = Vec::with_capacity(b);
    for (i, lines) in line_lists.iter().enumerate() {
        let mut flags = Vec::with_capacity(k.min(lines.len()));
        for (j, line) in lines.iter().take(k).enumerate() {
            let seq = encode_ids(tok, tok.encode(line.as_ref()), p);
            let off = (i * k + j) * p;
            tokens[off..off + p].copy_from_slice(&seq.ids);
            token_mask[off..off + p].copy_from_slice(&seq.mask);
            line_mask[i * k + j] = 1;
            flags.push(seq.truncated);
        }
        line_truncated.push(flags);
    }
    Ok(LineTokenBatch {
        b,
        k,
        p,
        tokens,
        token_mask,
        line_mask,
        source_lines: line_lists.iter().map(Vec::len).collect(),
        line_truncated,
    })
}
