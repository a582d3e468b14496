//! Layers shared by the sequence encoders and the line-structure transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_xavier(&format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_filled(&format!("{name}.bias"), vec![fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_filled(&format!("{name}.gamma"), vec![width], 1.0),
            beta: store.add_filled(&format!("{name}.beta"), vec![width], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), hidden, hidden, rng),
            key: Linear::new(store, &format!("{name}.key"), hidden, hidden, rng),
            value: Linear::new(store, &format!("{name}.value"), hidden, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, hidden, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: &[u8]) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let a = g.attention(q, k, v, key_mask, self.heads);
        self.output.forward(g, a)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + ffn(ln(x))`. With all weights
/// zero the block is exactly the identity.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), cfg.hidden),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                cfg.hidden,
                cfg.heads,
                rng,
            ),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), cfg.hidden),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), cfg.hidden, cfg.ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn, cfg.hidden, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: &[u8]) -> Var {
        let h = self.attn_norm.forward(g, x);
        let h = self.attn.forward(g, h, key_mask);
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        let h = self.ffn_norm.forward(g, x);
        let h = self.ffn_in.forward(g, h);
        let h = g.gelu(h);
        let h = self.ffn_out.forward(g, h);
        let h = g.dropout(h, self.dropout);
        g.add(x, h)
    }

    /// All parameter ids owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.weight, l.bias];
        let mut out = vec![
            self.attn_norm.gamma,
            self.attn_norm.beta,
            self.ffn_norm.gamma,
            self.ffn_norm.beta,
        ];
        for l in [
            &self.attn.query,
            &self.attn.key,
            &self.attn.value,
            &self.attn.output,
            &self.ffn_in,
            &self.ffn_out,
        ] {
            out.extend(lin(l));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StackConfig, rng: &mut impl Rng) -> Self {
        Self {
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlock::new(store, &format!("{name}.layers.{i}"), cfg, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, key_mask: &[u8]) -> Var {
        for block in &self.blocks {
            x = block.forward(g, x, key_mask);
        }
        x
    }
}

/// Fixed sinusoidal position table `[len, width]`, row-major.
pub fn sinusoidal_positions(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
