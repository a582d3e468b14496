//! Labeled snippet datasets in the defect-detection JSONL layout
//! (`{"idx": int, "func": string, "target": 0|1}` per line), deterministic
//! train/valid/test splitting, and token statistics for the two
//! preprocessing modes.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CslsError, Result};
use crate::linealign::split_lines;
use crate::tokenize::{normalize_baseline, normalize_structured, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub id: u64,
    pub code: String,
    /// 0 = secure, 1 = vulnerable.
    pub label: u8,
}

#[derive(Deserialize)]
struct RawRecord {
    idx: Option<u64>,
    func: Option<String>,
    target: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    idx: u64,
    func: &'a str,
    target: u8,
}

/// Read a JSONL dataset. Line numbers in errors are 1-based; `idx` defaults
/// to the 0-based line index when absent. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<CodeSnippet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|source| CslsError::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                source,
            })?;
        let code = raw.func.ok_or_else(|| CslsError::Validation {
            line: lineno,
            message: "missing string field \"func\"".into(),
        })?;
        if code.is_empty() {
            return Err(CslsError::Validation {
                line: lineno,
                message: "\"func\" is empty".into(),
            });
        }
        let label = match raw.target.as_ref().and_then(|v| v.as_i64()) {
            Some(0) => 0,
            Some(1) => 1,
            _ => {
                return Err(CslsError::Validation {
                    line: lineno,
                    message: format!(
                        "\"target\" must be 0 or 1, got {}",
                        raw.target
                            .map_or_else(|| "nothing".to_string(), |v| v.to_string())
                    ),
                })
            }
        };
        let id = raw.idx.unwrap_or(i as u64);
        if !seen.insert(id) {
            return Err(CslsError::Validation {
                line: lineno,
                message: format!("duplicate idx {id}"),
            });
        }
        out.push(CodeSnippet { id, code, label });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, snippets: &[CodeSnippet]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for s in snippets {
        let rec = OutRecord {
            idx: s.id,
            func: &s.code,
            target: s.label,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSplit {
    pub train: Vec<CodeSnippet>,
    pub valid: Vec<CodeSnippet>,
    pub test: Vec<CodeSnippet>,
}

/// Shuffle with `seed` and cut into train/valid/test. Valid and test sizes are
/// `floor(n * ratio)`; the remainder goes to train.
pub fn split_dataset(
    snippets: &[CodeSnippet],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(CslsError::InvalidArgument(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(CslsError::InvalidArgument(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    if snippets.is_empty() {
        return Err(CslsError::Empty("dataset to split"));
    }
    let n = snippets.len();
    // the small slack absorbs products like 0.1 * 30 = 2.9999999999999996
    let n_valid = ((n as f64) * rv + 1e-9).floor() as usize;
    let n_test = ((n as f64) * rs + 1e-9).floor() as usize;
    let n_train = n - n_valid - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: &[usize]| r.iter().map(|&i| snippets[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetStats {
    pub id: u64,
    pub structured_tokens: usize,
    pub baseline_tokens: usize,
    pub lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub snippets: usize,
    pub limit: usize,
    pub mean_tokens_structured: f64,
    pub mean_tokens_baseline: f64,
    /// `mean_tokens_baseline / mean_tokens_structured`.
    pub ratio: f64,
    pub mean_lines: f64,
    pub frac_over_limit: f64,
    #[serde(skip)]
    pub per_snippet: Vec<SnippetStats>,
}

/// Token and line statistics. Counts exclude special tokens; `mean_lines`
/// counts blank lines.
pub fn corpus_stats<T: Tokenizer + ?Sized>(
    snippets: &[CodeSnippet],
    tok: &T,
    limit: usize,
) -> Result<CorpusStats> {
    if snippets.is_empty() {
        return Err(CslsError::Empty("corpus"));
    }
    if limit == 0 {
        return Err(CslsError::InvalidArgument(
            "token limit must be positive".into(),
        ));
    }
    let per_snippet: Vec<SnippetStats> = snippets
        .iter()
        .map(|s| SnippetStats {
            id: s.id,
            structured_tokens: tok.token_count(&normalize_structured(&s.code)),
            baseline_tokens: tok.token_count(&normalize_baseline(&s.code)),
            lines: split_lines(&s.code).len(),
        })
        .collect();
    let n = per_snippet.len() as f64;
    let sum = |f: fn(&SnippetStats) -> usize| per_snippet.iter().map(f).sum::<usize>() as f64;
    let mean_s = sum(|s| s.structured_tokens) / n;
    let mean_b = sum(|s| s.baseline_tokens) / n;
    let over = per_snippet
        .iter()
        .filter(|s| s.structured_tokens > limit)
        .count();
    Ok(CorpusStats {
        snippets: per_snippet.len(),
        limit,
        mean_tokens_structured: mean_s,
        mean_tokens_baseline: mean_b,
        ratio: if mean_s > 0.0 { mean_b / mean_s } else { 0.0 },
        mean_lines: sum(|s| s.lines) / n,
        frac_over_limit: over as f64 / n,
        per_snippet,
    })
}

impl CorpusStats {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.per_snippet {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}
