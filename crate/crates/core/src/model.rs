//! The three-branch classifier: global semantics, the sensitive line, and the
//! structure over line semantics, fused and classified.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batch::{ModelBatch, PreprocessConfig};
use crate::encoders::{EncoderConfig, SequenceEncoder};
use crate::error::{CslsError, Result};
use crate::head::{bce_loss, fuse, ClassifierHead};
use crate::params::{ParamId, ParamStore};
use crate::sensitive::{select_sensitive_var, SelectionMode, SensitiveSelection};
use crate::structure::{detach, StructureConfig, StructureTransformer};
use crate::tokenize::ByteTokenizer;

/// Which representations feed the head. A disabled branch contributes zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub structure: bool,
    pub sensitive: bool,
    pub global: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            structure: true,
            sensitive: true,
            global: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preprocess: PreprocessConfig,
    pub line_encoder: EncoderConfig,
    pub global_encoder: EncoderConfig,
    pub structure: StructureConfig,
    pub threshold: f64,
    /// Cut the gradient between the line encoder and the structure transformer.
    pub detach: bool,
    pub selection: SelectionMode,
    pub branches: Branches,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let enc = EncoderConfig::desk(ByteTokenizer::VOCAB_SIZE);
        Self {
            preprocess: PreprocessConfig::default(),
            line_encoder: enc,
            global_encoder: enc,
            structure: StructureConfig::desk(enc.hidden),
            threshold: 0.5,
            detach: true,
            selection: SelectionMode::Min,
            branches: Branches::default(),
        }
    }

    pub fn paper_scale() -> Self {
        let enc = EncoderConfig::paper_scale(ByteTokenizer::VOCAB_SIZE);
        Self {
            line_encoder: enc,
            global_encoder: enc,
            structure: StructureConfig::paper_scale(enc.hidden),
            ..Self::desk()
        }
    }

    pub fn hidden(&self) -> usize {
        self.line_encoder.hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.line_encoder.validate()?;
        self.global_encoder.validate()?;
        self.structure.validate()?;
        let h = self.line_encoder.hidden;
        if self.global_encoder.hidden != h || self.structure.hidden != h {
            return Err(CslsError::InvalidArgument(format!(
                "line encoder, global encoder and structure widths must agree ({h}, {}, {})",
                self.global_encoder.hidden, self.structure.hidden
            )));
        }
        let pp = &self.preprocess;
        if pp.p < 2 || pp.k_cap == 0 || pp.max_len < 2 {
            return Err(CslsError::InvalidArgument(format!(
                "invalid preprocessing settings {pp:?}"
            )));
        }
        if pp.p > self.line_encoder.max_positions || pp.max_len > self.global_encoder.max_positions
        {
            return Err(CslsError::InvalidArgument(
                "sequence lengths exceed encoder max_positions".into(),
            ));
        }
        if pp.k_cap > self.structure.max_lines {
            return Err(CslsError::InvalidArgument(format!(
                "k_cap {} exceeds structure max_lines {}",
                pp.k_cap, self.structure.max_lines
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

#[derive(Debug, Clone)]
pub struct CslsModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub line_encoder: SequenceEncoder,
    pub global_encoder: SequenceEncoder,
    pub structure: StructureTransformer,
    pub head: ClassifierHead,
}

/// Handles to the intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub line_embeddings: Var,
    pub s_repr: Var,
    pub l_repr: Var,
    pub g_repr: Var,
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
    pub selection: SensitiveSelection,
}

impl CslsModel {
    /// Build with freshly initialised parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let line_encoder =
            SequenceEncoder::new(&mut params, "line_encoder", cfg.line_encoder, &mut rng)?;
        let global_encoder =
            SequenceEncoder::new(&mut params, "global_encoder", cfg.global_encoder, &mut rng)?;
        let structure = StructureTransformer::new(&mut params, cfg.structure, &mut rng)?;
        let head = ClassifierHead::new(&mut params, cfg.hidden(), cfg.threshold, &mut rng);
        Ok(Self {
            cfg,
            params,
            line_encoder,
            global_encoder,
            structure,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph, batch: &ModelBatch) -> Result<ForwardOutput> {
        let b = batch.len();
        let h = self.cfg.hidden();
        let lines = &batch.lines;
        let le = self.line_encoder.line_embed(g, lines)?;

        let s_repr = if self.cfg.branches.structure {
            let input = if self.cfg.detach { detach(g, le) } else { le };
            self.structure.structure_repr(g, input, &lines.line_mask)?
        } else {
            g.zeros(vec![b, h])
        };

        let (selection, l_repr) =
            select_sensitive_var(g, le, &lines.line_mask, self.cfg.selection)?;
        let l_repr = if self.cfg.branches.sensitive {
            l_repr
        } else {
            g.zeros(vec![b, h])
        };

        let g_repr = if self.cfg.branches.global {
            self.global_encoder.global_embed(g, &batch.global)?
        } else {
            g.zeros(vec![b, h])
        };

        let fused = fuse(g, s_repr, l_repr, g_repr)?;
        let logits = self.head.logits(g, fused)?;
        let probs = g.sigmoid(logits);
        Ok(ForwardOutput {
            line_embeddings: le,
            s_repr,
            l_repr,
            g_repr,
            fused,
            logits,
            probs,
            selection,
        })
    }

    /// Forward plus mean BCE against the batch labels.
    pub fn loss(&self, g: &mut Graph, batch: &ModelBatch) -> Result<(ForwardOutput, Var)> {
        let out = self.forward(g, batch)?;
        let loss = bce_loss(g, &batch.labels, out.probs)?;
        Ok((out, loss))
    }

    /// Eval-mode probabilities for a batch.
    pub fn predict(&self, batch: &ModelBatch) -> Result<(Vec<f64>, SensitiveSelection)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, batch)?;
        Ok((g.value(out.probs).to_vec(), out.selection))
    }

    pub fn line_encoder_params(&self) -> Vec<ParamId> {
        self.line_encoder.param_ids(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CodeSnippet;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.preprocess.max_len = 64;
        cfg.preprocess.k_cap = 5;
        cfg
    }

    fn snippets() -> Vec<CodeSnippet> {
        vec![
            CodeSnippet {
                id: 0,
                code: "int f(int a) {\n  char b[4];\n  strcpy(b, s);\n  return a;\n}\n".into(),
                label: 1,
            },
            CodeSnippet {
                id: 1,
                code: "void g(void)\n{\n\treturn;\n}".into(),
                label: 0,
            },
        ]
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        let mut bad = tiny();
        bad.structure.hidden = 16;
        assert!(bad.validate().is_err());
        let mut bad = tiny();
        bad.preprocess.k_cap = 500;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = CslsModel::new(tiny(), 5).unwrap();
        let b = CslsModel::new(tiny(), 5).unwrap();
        let c = CslsModel::new(tiny(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn forward_probabilities_in_range() {
        let model = CslsModel::new(tiny(), 1).unwrap();
        let s = snippets();
        let refs: Vec<&CodeSnippet> = s.iter().collect();
        let batch = ModelBatch::build(&refs, &model.cfg.preprocess, &ByteTokenizer).unwrap();
        let (probs, sel) = model.predict(&batch).unwrap();
        assert_eq!(probs.len(), 2);
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(sel
            .min_index
            .iter()
            .zip(0..2)
            .all(|(&j, i)| batch.lines.is_real(i, j)));
    }
}
