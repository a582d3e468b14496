//! Line-structure transformer.
//!
//! Takes the per-line vectors `[b, k, h]`, adds a sinusoidal encoding of the
//! line number, runs a transformer whose attention is restricted to real
//! lines, and pools the result to `[b, h]`. The model feeds it a detached copy
//! of the line embeddings, so this branch trains only its own weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CslsError, Result};
use crate::nn::{sinusoidal_positions, StackConfig, TransformerStack};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StructurePooling {
    /// Mean over real lines.
    #[default]
    MaskedMean,
    /// Output state of the first line.
    FirstLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    /// Longest line index the structure model is configured for; must cover `k_cap`.
    pub max_lines: usize,
    pub dropout: f64,
    #[serde(default)]
    pub pooling: StructurePooling,
}

impl StructureConfig {
    pub fn desk(hidden: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden,
            ffn: 2 * hidden,
            max_lines: 128,
            dropout: 0.0,
            pooling: StructurePooling::MaskedMean,
        }
    }

    /// 8 layers, 8 heads.
    pub fn paper_scale(hidden: usize) -> Self {
        Self {
            layers: 8,
            heads: 8,
            hidden,
            ffn: 4 * hidden,
            max_lines: 128,
            dropout: 0.1,
            pooling: StructurePooling::MaskedMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.layers,
            self.heads,
            self.hidden,
            self.ffn,
            self.max_lines,
        ]
        .contains(&0)
        {
            return Err(CslsError::InvalidArgument(format!(
                "structure dimensions must be >= 1: {self:?}"
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(CslsError::InvalidArgument(format!(
                "structure hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StructureTransformer {
    pub cfg: StructureConfig,
    pub stack: TransformerStack,
}

impl StructureTransformer {
    pub fn new(store: &mut ParamStore, cfg: StructureConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stack_cfg = StackConfig {
            hidden: cfg.hidden,
            layers: cfg.layers,
            heads: cfg.heads,
            ffn: cfg.ffn,
            dropout: cfg.dropout,
        };
        Ok(Self {
            cfg,
            stack: TransformerStack::new(store, "structure", &stack_cfg, rng),
        })
    }

    /// `S_repr` for `[b, k, h]` line vectors under `line_mask` `[b, k]`.
    pub fn structure_repr(&self, g: &mut Graph, lines: Var, line_mask: &[u8]) -> Result<Var> {
        let shape = g.shape(lines).to_vec();
        let [b, k, h] = shape[..] else {
            return Err(CslsError::Shape(format!(
                "structure input must be [b, k, h], got {shape:?}"
            )));
        };
        if h != self.cfg.hidden {
            return Err(CslsError::Shape(format!(
                "structure hidden {} != line width {h}",
                self.cfg.hidden
            )));
        }
        if line_mask.len() != b * k {
            return Err(CslsError::Shape(format!(
                "line mask has {} entries, expected {}",
                line_mask.len(),
                b * k
            )));
        }
        if k > self.cfg.max_lines {
            return Err(CslsError::Shape(format!(
                "{k} lines exceed max_lines {}",
                self.cfg.max_lines
            )));
        }
        if let Some(i) = (0..b).find(|&i| !line_mask[i * k..(i + 1) * k].contains(&1)) {
            return Err(CslsError::NoRealLines(i));
        }
        let x = g.add_const(lines, &sinusoidal_positions(k, h));
        let x = self.stack.forward(g, x, line_mask);
        Ok(match self.cfg.pooling {
            StructurePooling::MaskedMean => g.masked_mean(x, line_mask),
            StructurePooling::FirstLine => g.select_rows(x, &vec![0; b]),
        })
    }

    pub fn layer_param_ids(&self, i: usize) -> Vec<ParamId> {
        self.stack.blocks[i].param_ids()
    }
}

/// Gradient barrier: same values, no gradient back into whatever produced `x`.
pub fn detach(g: &mut Graph, x: Var) -> Var {
    g.detach(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: StructureConfig, seed: u64) -> (ParamStore, StructureTransformer) {
        let mut store = ParamStore::default();
        let st = StructureTransformer::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        (store, st)
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn output_shape() {
        let (store, st) = build(StructureConfig::desk(32), 0);
        let mut g = Graph::new(&store);
        let le = g.input(random(2 * 5 * 32, 1), vec![2, 5, 32]);
        let s = st.structure_repr(&mut g, le, &[1; 10]).unwrap();
        assert_eq!(g.shape(s), &[2, 32]);
    }

    #[test]
    fn detach_is_identity_forward() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(random(12, 2), vec![1, 3, 4]);
        let d = detach(&mut g, x);
        assert_eq!(g.value(d), g.value(x));
    }

    #[test]
    fn trailing_padding_lines_do_not_matter() {
        let (store, st) = build(StructureConfig::desk(32), 3);
        let real = random(3 * 32, 4);
        let mut g = Graph::new(&store);
        let a = g.input(real.clone(), vec![1, 3, 32]);
        let a = st.structure_repr(&mut g, a, &[1, 1, 1]).unwrap();
        let mut padded = real;
        padded.extend(random(4 * 32, 5));
        let b = g.input(padded, vec![1, 7, 32]);
        let b = st
            .structure_repr(&mut g, b, &[1, 1, 1, 0, 0, 0, 0])
            .unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_line_residual_only_returns_position_encoded_input() {
        let (mut store, st) = build(StructureConfig::desk(8), 6);
        for i in 0..st.cfg.layers {
            for id in st.layer_param_ids(i) {
                if !store.get(id).name.ends_with("gamma") {
                    store.get_mut(id).data.fill(0.0);
                }
            }
        }
        let v = random(8, 7);
        let mut g = Graph::new(&store);
        let le = g.input(v.clone(), vec![1, 1, 8]);
        let s = st.structure_repr(&mut g, le, &[1]).unwrap();
        let pe = sinusoidal_positions(1, 8);
        let expect: Vec<f64> = v.iter().zip(&pe).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(s), &expect[..]);
    }

    #[test]
    fn rejects_all_padding_snippet() {
        let (store, st) = build(StructureConfig::desk(8), 8);
        let mut g = Graph::new(&store);
        let le = g.input(random(2 * 2 * 8, 9), vec![2, 2, 8]);
        assert!(matches!(
            st.structure_repr(&mut g, le, &[1, 0, 0, 0]),
            Err(CslsError::NoRealLines(1))
        ));
    }

    #[test]
    fn swapping_lines_changes_output() {
        let (store, st) = build(StructureConfig::desk(32), 10);
        let mut changed = 0;
        for trial in 0..100 {
            let v = random(2 * 32, 100 + trial);
            let swapped: Vec<f64> = v[32..].iter().chain(&v[..32]).copied().collect();
            let mut g = Graph::new(&store);
            let a = g.input(v, vec![1, 2, 32]);
            let a = st.structure_repr(&mut g, a, &[1, 1]).unwrap();
            let b = g.input(swapped, vec![1, 2, 32]);
            let b = st.structure_repr(&mut g, b, &[1, 1]).unwrap();
            if g.value(a)
                .iter()
                .zip(g.value(b))
                .any(|(x, y)| (x - y).abs() > 1e-6)
            {
                changed += 1;
            }
        }
        assert!(changed >= 95, "only {changed}/100 swaps changed S_repr");
    }
}
