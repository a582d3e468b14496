//! Model inputs: the whole-fragment token batch and the bundle fed to a forward pass.

use serde::{Deserialize, Serialize};

use crate::corpus::CodeSnippet;
use crate::error::{CslsError, Result};
use crate::linealign::{align_batch, split_lines, AlignMode, LineTokenBatch};
use crate::tokenize::{encode_text, NormalizeMode, Tokenizer};

/// `[b, n]` ids and mask for whole fragments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalTokenBatch {
    pub b: usize,
    pub n: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub truncated: Vec<bool>,
}

impl GlobalTokenBatch {
    pub fn build<T: Tokenizer + ?Sized>(texts: &[&str], tok: &T, max_len: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(CslsError::Empty("global batch"));
        }
        let mut ids = Vec::with_capacity(texts.len() * max_len);
        let mut mask = Vec::with_capacity(texts.len() * max_len);
        let mut truncated = Vec::with_capacity(texts.len());
        for t in texts {
            let seq = encode_text(tok, t, max_len)?;
            ids.extend(seq.ids);
            mask.extend(seq.mask);
            truncated.push(seq.truncated);
        }
        Ok(Self {
            b: texts.len(),
            n: max_len,
            ids,
            mask,
            truncated,
        })
    }

    pub fn row(&self, i: usize) -> (&[u32], &[u8]) {
        (
            &self.ids[i * self.n..(i + 1) * self.n],
            &self.mask[i * self.n..(i + 1) * self.n],
        )
    }

    /// Drop trailing columns that are padding in every row. Masked keys never
    /// influence unmasked outputs, so encoding the trimmed batch gives the same
    /// values at every real position.
    pub fn trimmed(&self) -> GlobalTokenBatch {
        let width = (0..self.b)
            .map(|i| {
                self.row(i)
                    .1
                    .iter()
                    .rposition(|&m| m == 1)
                    .map_or(0, |p| p + 1)
            })
            .max()
            .unwrap_or(0)
            .max(1);
        if width == self.n {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(self.b * width);
        let mut mask = Vec::with_capacity(self.b * width);
        for i in 0..self.b {
            let (r, m) = self.row(i);
            ids.extend_from_slice(&r[..width]);
            mask.extend_from_slice(&m[..width]);
        }
        GlobalTokenBatch {
            b: self.b,
            n: width,
            ids,
            mask,
            truncated: self.truncated.clone(),
        }
    }
}

/// Settings that turn snippets into model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_len: usize,
    pub p: usize,
    pub k_cap: usize,
    pub align: AlignMode,
    pub mode: NormalizeMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_len: crate::tokenize::DEFAULT_MAX_LEN,
            p: crate::linealign::DEFAULT_P,
            k_cap: crate::linealign::DEFAULT_K_CAP,
            align: AlignMode::PerBatch,
            mode: NormalizeMode::Structured,
        }
    }
}

/// Everything one forward pass needs for a batch of snippets.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub ids: Vec<u64>,
    pub labels: Vec<u8>,
    pub global: GlobalTokenBatch,
    pub lines: LineTokenBatch,
}

impl ModelBatch {
    /// The normalization mode applies to the global text; lines are always
    /// split from the raw text, since splitting needs the newlines.
    pub fn build<T: Tokenizer + ?Sized>(
        snippets: &[&CodeSnippet],
        cfg: &PreprocessConfig,
        tok: &T,
    ) -> Result<Self> {
        let texts: Vec<String> = snippets.iter().map(|s| cfg.mode.apply(&s.code)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let global = GlobalTokenBatch::build(&refs, tok, cfg.max_len)?;
        let line_lists: Vec<Vec<&str>> = snippets
            .iter()
            .map(|s| {
                let l = split_lines(&s.code);
                // a snippet with no newline-delimited content still has one (empty) line
                if l.is_empty() {
                    vec![""]
                } else {
                    l
                }
            })
            .collect();
        let lines = align_batch(&line_lists, cfg.k_cap, cfg.p, tok, cfg.align)?;
        Ok(Self {
            ids: snippets.iter().map(|s| s.id).collect(),
            labels: snippets.iter().map(|s| s.label).collect(),
            global,
            lines,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
