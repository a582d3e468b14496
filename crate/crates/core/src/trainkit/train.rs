use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, Metrics};
use super::optim::{clip_grad_norm, Adam};
use crate::autograd::Graph;
use crate::batch::ModelBatch;
use crate::corpus::{CodeSnippet, DatasetSplit};
use crate::error::{CslsError, Result};
use crate::model::CslsModel;
use crate::tokenize::ByteTokenizer;

pub const DEFAULT_SEED: u64 = 123456;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    PaperScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub threshold: f64,
    pub preset: Preset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper_scale()
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            batch_size: 12,
            learning_rate: 2e-5,
            seed: DEFAULT_SEED,
            epochs: 10,
            max_steps: None,
            clip_norm: 1.0,
            threshold: 0.5,
            preset: Preset::PaperScale,
        }
    }

    /// Small randomly initialised models need a larger step than fine-tuning does.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            preset: Preset::Desk,
            ..Self::paper_scale()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CslsError::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        // zero is accepted so a run can be checked for a null update
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CslsError::InvalidArgument(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(CslsError::InvalidArgument(format!(
                "clip_norm {} must be > 0",
                self.clip_norm
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CslsError::InvalidArgument(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far, including this epoch.
    pub steps: usize,
    /// Mean of the per-batch losses.
    pub loss: f64,
    pub train_accuracy: f64,
    pub valid: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation F1.
    pub model: CslsModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Initialise a model from `train_cfg.seed` and train it.
pub fn fit(
    model_cfg: crate::model::ModelConfig,
    split: &DatasetSplit,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = CslsModel::new(model_cfg, train_cfg.seed)?;
    train(model, split, train_cfg)
}

pub fn train(
    mut model: CslsModel,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(CslsError::Empty("training split"));
    }
    let tok = ByteTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let use_dropout = model.cfg.line_encoder.dropout > 0.0
        || model.cfg.global_encoder.dropout > 0.0
        || model.cfg.structure.dropout > 0.0;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut steps = 0usize;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=cfg.epochs {
        if steps >= max_steps {
            break;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= max_steps {
                break;
            }
            let snippets: Vec<&CodeSnippet> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = ModelBatch::build(&snippets, &model.cfg.preprocess, &tok)?;
            let mut g = Graph::new(&model.params);
            if use_dropout {
                g = g.with_dropout(ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ (steps as u64 + 1).wrapping_mul(0x9e37_79b9),
                ));
            }
            let (out, loss) = model.loss(&mut g, &batch)?;
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(CslsError::Diverged {
                    step: steps,
                    loss: loss_value,
                });
            }
            for (p, &y) in g.value(out.probs).iter().zip(&batch.labels) {
                correct += usize::from(u8::from(*p >= cfg.threshold) == y);
            }
            seen += batch.len();
            let mut grads = g.backward(loss);
            drop(g);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads);
            loss_sum += loss_value;
            batches += 1;
            steps += 1;
        }
        let valid = if split.valid.is_empty() {
            None
        } else {
            Some(evaluate(&model, &split.valid, cfg.threshold, cfg.batch_size)?.metrics())
        };
        // later epochs win ties; with no validation data the last epoch is kept
        let score = valid.map_or(f64::NEG_INFINITY, |m| m.f1);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            steps,
            loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            valid,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        steps,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "acc", "prec", "rec", "f1"])?;
    for r in history {
        let m = r.valid.unwrap_or_default();
        let fmt = |v: f64| {
            if r.valid.is_some() {
                v.to_string()
            } else {
                String::new()
            }
        };
        w.write_record([
            r.epoch.to_string(),
            r.loss.to_string(),
            fmt(m.accuracy),
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_json(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, history)?;
    f.flush()?;
    Ok(())
}
