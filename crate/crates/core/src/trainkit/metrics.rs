use serde::{Deserialize, Serialize};

use crate::batch::ModelBatch;
use crate::corpus::CodeSnippet;
use crate::error::{CslsError, Result};
use crate::model::CslsModel;
use crate::sensitive::SensitiveAudit;
use crate::tokenize::ByteTokenizer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(labels: &[u8], predictions: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(predictions) {
            match (y, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Precision, recall, F1 and accuracy. A zero denominator yields 0.
    pub fn metrics(&self) -> Metrics {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * (precision * recall) / (precision + recall)
        };
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetRecord {
    pub id: u64,
    pub label: u8,
    pub probability: f64,
    pub prediction: u8,
    /// Index of the line chosen as the sensitive line.
    pub sensitive_line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub threshold: f64,
    pub records: Vec<SnippetRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<SnippetRecord>, threshold: f64) -> Self {
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let preds: Vec<u8> = records.iter().map(|r| r.prediction).collect();
        let confusion = Confusion::from_predictions(&labels, &preds);
        let m = confusion.metrics();
        Self {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            confusion,
            threshold,
            records,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }

    /// Selected line text for each evaluated snippet.
    pub fn sensitive_audit(&self, snippets: &[CodeSnippet]) -> Vec<SensitiveAudit> {
        self.records
            .iter()
            .filter_map(|r| {
                let s = snippets.iter().find(|s| s.id == r.id)?;
                let line = crate::linealign::split_lines(&s.code)
                    .get(r.sensitive_line)
                    .copied()
                    .unwrap_or("");
                Some(SensitiveAudit {
                    id: r.id,
                    min_index: r.sensitive_line,
                    line: line.to_owned(),
                })
            })
            .collect()
    }
}

/// Run the model over `snippets` in batches of `batch_size` and score it.
pub fn evaluate(
    model: &CslsModel,
    snippets: &[CodeSnippet],
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    if snippets.is_empty() {
        return Err(CslsError::Empty("evaluation set"));
    }
    let batch_size = batch_size.max(1);
    let mut records = Vec::with_capacity(snippets.len());
    for chunk in snippets.chunks(batch_size) {
        let refs: Vec<&CodeSnippet> = chunk.iter().collect();
        let batch = ModelBatch::build(&refs, &model.cfg.preprocess, &ByteTokenizer)?;
        let (probs, sel) = model.predict(&batch)?;
        for (i, s) in chunk.iter().enumerate() {
            records.push(SnippetRecord {
                id: s.id,
                label: s.label,
                probability: probs[i],
                prediction: u8::from(probs[i] >= threshold),
                sensitive_line: sel.min_index[i],
            });
        }
    }
    Ok(EvalReport::from_records(records, threshold))
}
