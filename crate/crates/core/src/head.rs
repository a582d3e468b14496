//! Fusion of the three representations and the sigmoid classifier.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CslsError, Result};
use crate::nn::Linear;
use crate::params::ParamStore;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub hidden: usize,
    pub dense: Linear,
    pub out: Linear,
    pub threshold: f64,
}

impl ClassifierHead {
    /// MLP `3h -> h -> 1` with a tanh in between.
    pub fn new(store: &mut ParamStore, hidden: usize, threshold: f64, rng: &mut impl Rng) -> Self {
        Self {
            hidden,
            dense: Linear::new(store, "head.dense", 3 * hidden, hidden, rng),
            out: Linear::new(store, "head.out", hidden, 1, rng),
            threshold,
        }
    }

    /// Logits `[b]`.
    pub fn logits(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let shape = g.shape(fused).to_vec();
        let [b, w] = shape[..] else {
            return Err(CslsError::Shape(format!(
                "head input must be [b, 3h], got {shape:?}"
            )));
        };
        if w != 3 * self.hidden {
            return Err(CslsError::Shape(format!(
                "head expects width {}, got {w}",
                3 * self.hidden
            )));
        }
        let x = self.dense.forward(g, fused);
        let x = g.tanh(x);
        let x = self.out.forward(g, x);
        Ok(g.reshape(x, vec![b]))
    }

    /// Probabilities `[b]` in (0, 1).
    pub fn predict(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let logits = self.logits(g, fused)?;
        Ok(g.sigmoid(logits))
    }

    pub fn classify(&self, prob: f64) -> u8 {
        u8::from(prob >= self.threshold)
    }
}

/// `[S_repr, L_repr, G_repr]` along the feature axis.
pub fn fuse(g: &mut Graph, s_repr: Var, l_repr: Var, g_repr: Var) -> Result<Var> {
    let shapes = [
        g.shape(s_repr).to_vec(),
        g.shape(l_repr).to_vec(),
        g.shape(g_repr).to_vec(),
    ];
    if shapes.iter().any(|s| s.len() != 2) || shapes[1] != shapes[0] || shapes[2] != shapes[0] {
        return Err(CslsError::Shape(format!(
            "fuse needs three equal [b, h] inputs, got {shapes:?}"
        )));
    }
    Ok(g.concat(&[s_repr, l_repr, g_repr]))
}

fn check_labels(labels: &[u8]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&y| match y {
            0 | 1 => Ok(y as f64),
            other => Err(CslsError::InvalidArgument(format!(
                "label {other} is not 0 or 1"
            ))),
        })
        .collect()
}

/// Mean binary cross-entropy on the graph.
pub fn bce_loss(g: &mut Graph, labels: &[u8], probs: Var) -> Result<Var> {
    let y = check_labels(labels)?;
    if y.len() != g.value(probs).len() {
        return Err(CslsError::Shape(format!(
            "{} labels for {} predictions",
            y.len(),
            g.value(probs).len()
        )));
    }
    Ok(g.bce(probs, &y, BCE_EPS))
}

/// Mean binary cross-entropy on plain values.
pub fn bce(labels: &[u8], probs: &[f64]) -> Result<f64> {
    let y = check_labels(labels)?;
    if y.len() != probs.len() || y.is_empty() {
        return Err(CslsError::Shape(format!(
            "{} labels for {} predictions",
            y.len(),
            probs.len()
        )));
    }
    Ok(crate::autograd::bce_mean(&y, probs, BCE_EPS))
}
