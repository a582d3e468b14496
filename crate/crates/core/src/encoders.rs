//! Token-sequence encoders used for both line semantics and global semantics.
//!
//! A [`SequenceEncoder`] is a token embedding plus fixed sinusoidal positions,
//! and a stack of pre-norm transformer blocks. Attention respects the token
//! mask, and the representation of a sequence is the hidden state at position
//! 0, where the tokenizer always places `[CLS]`.
//!
//! There is no final layer norm: a freshly initialised one makes every row's
//! mean exactly zero, which would leave sensitive-line selection to rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batch::GlobalTokenBatch;
use crate::error::{CslsError, Result};
use crate::linealign::LineTokenBatch;
use crate::nn::{sinusoidal_positions, StackConfig, TransformerStack};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// CPU-sized default.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            max_positions: 1024,
            dropout: 0.0,
        }
    }

    /// Dimensions of a base-size pre-trained code encoder.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_positions: 1024,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.hidden,
            self.layers,
            self.heads,
            self.ffn,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return Err(CslsError::InvalidArgument(format!(
                "encoder dimensions must be >= 1: {self:?}"
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(CslsError::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CslsError::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub cfg: EncoderConfig,
    pub name: String,
    pub embed: ParamId,
    pub stack: TransformerStack,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        // unit-variance embeddings, on the same scale as the sinusoidal positions
        let a = 3f64.sqrt();
        let table = (0..cfg.vocab_size * cfg.hidden)
            .map(|_| rng.random_range(-a..a))
            .collect();
        let embed = store.add(
            &format!("{name}.embed"),
            vec![cfg.vocab_size, cfg.hidden],
            table,
        );
        let stack = TransformerStack::new(store, name, &cfg.stack(), rng);
        Ok(Self {
            cfg,
            name: name.to_owned(),
            embed,
            stack,
        })
    }

    /// Encode `[batch, len]` ids under `mask`, giving `[batch, len, h]`.
    pub fn encode_sequences(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        mask: &[u8],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        if tokens.len() != mask.len() || tokens.len() != batch * len {
            return Err(CslsError::Shape(format!(
                "tokens ({}) and mask ({}) must both hold {batch}x{len} entries",
                tokens.len(),
                mask.len()
            )));
        }
        if len > self.cfg.max_positions {
            return Err(CslsError::Shape(format!(
                "sequence length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(CslsError::TokenOutOfRange {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(CslsError::InvalidArgument("mask must be binary".into()));
        }
        let h = self.cfg.hidden;
        let table = g.param(self.embed);
        let x = g.embedding(table, tokens);
        let x = g.reshape(x, vec![batch, len, h]);
        let x = g.add_const(x, &sinusoidal_positions(len, h));
        let x = g.dropout(x, self.cfg.dropout);
        Ok(self.stack.forward(g, x, mask))
    }

    /// Representation of a line batch: flatten `[b, k, p]` to `[b*k, p]`,
    /// encode in one pass, take the `[CLS]` state, reshape to `[b, k, h]`.
    /// Rows of padding lines are finite but meaningless; consumers mask them.
    pub fn line_embed(&self, g: &mut Graph, batch: &LineTokenBatch) -> Result<Var> {
        let rows = batch.b * batch.k;
        let hidden = self.encode_sequences(g, &batch.tokens, &batch.token_mask, rows, batch.p)?;
        let pooled = cls_pool(g, hidden)?;
        Ok(g.reshape(pooled, vec![batch.b, batch.k, self.cfg.hidden]))
    }

    /// `[b, h]` whole-fragment representation.
    pub fn global_embed(&self, g: &mut Graph, batch: &GlobalTokenBatch) -> Result<Var> {
        let t = batch.trimmed();
        let hidden = self.encode_sequences(g, &t.ids, &t.mask, t.b, t.n)?;
        cls_pool(g, hidden)
    }

    /// Parameter ids of transformer block `i`.
    pub fn layer_param_ids(&self, i: usize) -> Vec<ParamId> {
        self.stack.blocks[i].param_ids()
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let prefix = format!("{}.", self.name);
        store.with_prefix(&prefix).collect()
    }
}

/// First-position hidden state: `[B, l, h]` → `[B, h]`.
pub fn cls_pool(g: &mut Graph, hidden: Var) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    let [b, l, _] = shape[..] else {
        return Err(CslsError::Shape(format!(
            "cls_pool expects [B, l, h], got {shape:?}"
        )));
    };
    if l == 0 {
        return Err(CslsError::Shape(
            "cls_pool over an empty sequence dimension".into(),
        ));
    }
    Ok(g.select_rows(hidden, &vec![0; b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linealign::{align_batch, AlignMode};
    use crate::tokenize::ByteTokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(cfg: EncoderConfig) -> (ParamStore, SequenceEncoder) {
        let mut store = ParamStore::default();
        let enc = SequenceEncoder::new(&mut store, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        (store, enc)
    }

    fn random_ids(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(4..260)).collect()
    }

    #[test]
    fn shape_contract() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let mut g = Graph::new(&store);
        let ids = random_ids(40, 1);
        let out = enc.encode_sequences(&mut g, &ids, &[1; 40], 2, 20).unwrap();
        assert_eq!(g.shape(out), &[2, 20, 32]);
        let pooled = cls_pool(&mut g, out).unwrap();
        assert_eq!(g.shape(pooled), &[2, 32]);
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let row = random_ids(20, 2);
        let ids: Vec<u32> = row.iter().chain(&row).copied().collect();
        let mut g = Graph::new(&store);
        let out = enc.encode_sequences(&mut g, &ids, &[1; 40], 2, 20).unwrap();
        let v = g.value(out);
        assert_eq!(&v[..640], &v[640..]);
    }

    #[test]
    fn masked_position_ids_do_not_leak() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let mut ids = random_ids(20, 3);
        let mut mask = vec![1u8; 20];
        mask[12..].fill(0);
        let mut g = Graph::new(&store);
        let a = enc.encode_sequences(&mut g, &ids, &mask, 1, 20).unwrap();
        let a: Vec<f64> = g.value(a)[..12 * 32].to_vec();
        ids[15] = 200;
        ids[19] = 5;
        let mut g = Graph::new(&store);
        let b = enc.encode_sequences(&mut g, &ids, &mask, 1, 20).unwrap();
        assert_eq!(&g.value(b)[..12 * 32], &a[..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let mut g = Graph::new(&store);
        assert!(matches!(
            enc.encode_sequences(&mut g, &[1, 300], &[1, 1], 1, 2),
            Err(CslsError::TokenOutOfRange { id: 300, .. })
        ));
        assert!(matches!(
            enc.encode_sequences(&mut g, &[1, 5], &[1], 1, 2),
            Err(CslsError::Shape(_))
        ));
        let empty = g.input(vec![], vec![1, 0, 32]);
        assert!(cls_pool(&mut g, empty).is_err());
        assert!(EncoderConfig {
            heads: 5,
            ..EncoderConfig::desk(260)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cls_is_position_local_with_zero_attention() {
        let cfg = EncoderConfig {
            layers: 1,
            ..EncoderConfig::desk(260)
        };
        let (mut store, enc) = encoder(cfg);
        for id in enc.layer_param_ids(0) {
            if !store.get(id).name.ends_with("gamma") {
                store.get_mut(id).data.fill(0.0);
            }
        }
        let mut ids = random_ids(10, 4);
        ids[0] = 1;
        let mut g = Graph::new(&store);
        let h = enc.encode_sequences(&mut g, &ids, &[1; 10], 1, 10).unwrap();
        let a = cls_pool(&mut g, h).unwrap();
        let a = g.value(a).to_vec();
        for (i, id) in ids.iter_mut().enumerate().skip(1) {
            *id = 4 + i as u32;
        }
        let mut g = Graph::new(&store);
        let h = enc.encode_sequences(&mut g, &ids, &[1; 10], 1, 10).unwrap();
        let b = cls_pool(&mut g, h).unwrap();
        assert_eq!(g.value(b), &a[..]);
    }

    #[test]
    fn line_embed_shapes_and_rebatching() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let a: Vec<&str> = vec!["int a;", "  a++;", "", "return a;", "}"];
        let b: Vec<&str> = vec!["x = y;", "\tfoo(x, y);", "z;", "w;", "q;"];
        let both = align_batch(
            &[a.clone(), b.clone()],
            100,
            20,
            &ByteTokenizer,
            AlignMode::PerBatch,
        )
        .unwrap();
        let solo = align_batch(&[a], 100, 20, &ByteTokenizer, AlignMode::PerBatch).unwrap();
        let mut g = Graph::new(&store);
        let le2 = enc.line_embed(&mut g, &both).unwrap();
        assert_eq!(g.shape(le2), &[2, 5, 32]);
        let le1 = enc.line_embed(&mut g, &solo).unwrap();
        for (x, y) in g.value(le1).iter().zip(&g.value(le2)[..5 * 32]) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn global_embed_trims_without_changing_values() {
        let (store, enc) = encoder(EncoderConfig::desk(260));
        let gb = GlobalTokenBatch::build(&["int f(){\n  return 1;\n}", "x;"], &ByteTokenizer, 64)
            .unwrap();
        let mut g = Graph::new(&store);
        let trimmed = enc.global_embed(&mut g, &gb).unwrap();
        assert_eq!(g.shape(trimmed), &[2, 32]);
        let full = enc
            .encode_sequences(&mut g, &gb.ids, &gb.mask, 2, 64)
            .unwrap();
        let full = cls_pool(&mut g, full).unwrap();
        assert_eq!(g.value(trimmed), g.value(full));
    }
}
