//! A small reverse-mode autodiff tape over row-major `f64` buffers.
//!
//! Every forward op appends a node to a [`Graph`]; [`Graph::backward`] walks
//! the tape in reverse. Nodes that cannot reach a parameter are marked as not
//! requiring gradients and are skipped entirely, which is also how
//! [`Graph::detach`] works: the detached copy is a constant leaf, so nothing
//! upstream of it ever receives a gradient through that path.
//!
//! Ops are the handful a transformer classifier needs. Attention, layer norm
//! and the clamped binary cross-entropy are fused with hand-written backward
//! passes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        width: usize,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Attention(Box<AttentionCache>),
    SelectRow {
        x: Var,
        index: Vec<usize>,
        len: usize,
        width: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<u8>,
        len: usize,
        width: usize,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        rows: usize,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    key_mask: Vec<u8>,
    batch: usize,
    len: usize,
    heads: usize,
    width: usize,
    /// `[batch, heads, len, len]` softmax weights.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            dropout_rng: None,
        }
    }

    /// Enable dropout, drawing masks from `rng`. Without this, dropout is the identity.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Vec<f64>, shape: Vec<usize>) -> Var {
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "input shape mismatch"
        );
        self.push(value, shape, false, Op::Input)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.input(vec![0.0; n], shape)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.data.clone(), p.shape.clone(), true, Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    /// Same values, no gradient path back through `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, false, Op::Input)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(value, shape, rg, Op::Add(a, b))
    }

    /// `a + c`, with `c` repeated over the leading elements of `a` (its length must divide `a`'s).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let av = self.value(a);
        assert!(
            !c.is_empty() && av.len().is_multiple_of(c.len()),
            "add_const: length mismatch"
        );
        let value = av
            .iter()
            .enumerate()
            .map(|(i, x)| x + c[i % c.len()])
            .collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(value, shape, rg, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(value, shape, rg, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape: size mismatch"
        );
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, rg, Op::Reshape(a))
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (fan_in, fan_out) = match self.shape(w) {
            [i, o] => (*i, *o),
            s => panic!("linear: weight must be 2-d, got {s:?}"),
        };
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.last(), Some(&fan_in), "linear: input width mismatch");
        let rows = self.value(x).len() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), fan_out, "linear: bias width mismatch");
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            1.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            shape,
            rg,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
        )
    }

    /// Row lookup: `ids` of length N into `table` `[V, h]`, giving `[N, h]`.
    /// The caller reshapes as needed. Ids must be in range.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        let width = self.shape(table)[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let o = id as usize * width;
            out.extend_from_slice(&tv[o..o + width]);
        }
        let rg = self.rg(table);
        self.push(
            out,
            vec![ids.len(), width],
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                width,
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let width = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        self.push(
            out,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                width,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(value, shape, rg, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(value, shape, rg, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(value, shape, rg, Op::Sigmoid(x))
    }

    /// Inverted dropout; the identity unless the graph was built with a dropout RNG.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let scale: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&scale)
            .map(|(v, s)| v * s)
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(value, shape, rg, Op::Dropout { x, scale })
    }

    /// Multi-head scaled dot-product attention over `[B, l, h]` projections.
    ///
    /// `key_mask` is `[B, l]`; masked keys are excluded from the softmax
    /// outright, so their values never reach any output. A query row with no
    /// unmasked key produces zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[u8], heads: usize) -> Var {
        let shape = self.shape(q).to_vec();
        let [batch, len, width] = shape[..] else {
            panic!("attention: expected [B, l, h], got {shape:?}");
        };
        assert_eq!(self.shape(k), &shape[..]);
        assert_eq!(self.shape(v), &shape[..]);
        assert_eq!(
            key_mask.len(),
            batch * len,
            "attention: mask shape mismatch"
        );
        assert_eq!(width % heads, 0, "attention: width not divisible by heads");
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut out = vec![0.0; batch * len * width];
        let w = width as isize;
        let l = len as isize;
        for b in 0..batch {
            let mask = &key_mask[b * len..(b + 1) * len];
            if !mask.contains(&1) {
                continue;
            }
            for hd in 0..heads {
                let base = b * len * width + hd * d;
                let prob = &mut probs[(b * heads + hd) * len * len..][..len * len];
                // scores = scale * Q_h K_h^T
                gemm_strided(
                    len,
                    d,
                    len,
                    scale,
                    &qv[base..],
                    (w, 1),
                    &kv[base..],
                    (1, w),
                    prob,
                    (l, 1),
                );
                for row in prob.chunks_exact_mut(len) {
                    let max = row
                        .iter()
                        .zip(mask)
                        .filter(|(_, &m)| m == 1)
                        .fold(f64::NEG_INFINITY, |a, (&s, _)| a.max(s));
                    let mut sum = 0.0;
                    for (p, &m) in row.iter_mut().zip(mask) {
                        *p = if m == 1 { (*p - max).exp() } else { 0.0 };
                        sum += *p;
                    }
                    row.iter_mut().for_each(|p| *p /= sum);
                }
                gemm_strided(
                    len,
                    len,
                    d,
                    1.0,
                    prob,
                    (l, 1),
                    &vv[base..],
                    (w, 1),
                    &mut out[base..],
                    (w, 1),
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            key_mask: key_mask.to_vec(),
            batch,
            len,
            heads,
            width,
            probs,
        };
        self.push(out, shape, rg, Op::Attention(Box::new(cache)))
    }

    /// `[B, l, w]` → `[B, w]`, taking row `index[b]` of each batch element.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let [batch, len, width] = shape[..] else {
            panic!("select_rows: expected [B, l, w], got {shape:?}");
        };
        assert_eq!(index.len(), batch);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * width);
        for (b, &i) in index.iter().enumerate() {
            assert!(i < len, "select_rows: index out of range");
            out.extend_from_slice(&xv[(b * len + i) * width..][..width]);
        }
        let rg = self.rg(x);
        self.push(
            out,
            vec![batch, width],
            rg,
            Op::SelectRow {
                x,
                index: index.to_vec(),
                len,
                width,
            },
        )
    }

    /// Mean over the unmasked rows of each `[l, w]` slab; masked rows are skipped, not zero-weighted.
    pub fn masked_mean(&mut self, x: Var, mask: &[u8]) -> Var {
        let shape = self.shape(x).to_vec();
        let [batch, len, width] = shape[..] else {
            panic!("masked_mean: expected [B, l, w], got {shape:?}");
        };
        assert_eq!(mask.len(), batch * len);
        let xv = self.value(x);
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            let n = mask[b * len..(b + 1) * len]
                .iter()
                .filter(|&&m| m == 1)
                .count();
            assert!(n > 0, "masked_mean: no unmasked rows");
            let o = &mut out[b * width..(b + 1) * width];
            for j in 0..len {
                if mask[b * len + j] == 1 {
                    let row = &xv[(b * len + j) * width..][..width];
                    for t in 0..width {
                        o[t] += row[t];
                    }
                }
            }
            for t in o.iter_mut() {
                *t /= n as f64;
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            vec![batch, width],
            rg,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                len,
                width,
            },
        )
    }

    /// Concatenate 2-d `[rows, w_i]` tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| match self.shape(p) {
                [r, w] if *r == rows => *w,
                s => panic!("concat: expected [{rows}, w], got {s:?}"),
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            vec![rows, total],
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                rows,
            },
        )
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to `[eps, 1-eps]`) against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), targets.len(), "bce: length mismatch");
        let value = bce_mean(targets, pv, eps);
        let rg = self.rg(p);
        self.push(
            vec![value],
            vec![],
            rg,
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
        )
    }

    /// Reverse pass from scalar `loss` with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be a scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let params = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { params }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.grad_buf(grads, v) {
                        axpy(buf, g, 1.0);
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(buf, g, 1.0);
                }
            }
            Op::Scale(a, s) => {
                if let Some(buf) = self.grad_buf(grads, *a) {
                    axpy(buf, g, *s);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                let (rows, fan_in, fan_out) = (*rows, *fan_in, *fan_out);
                if self.rg(*x) {
                    let wv = &self.nodes[w.0].value;
                    let buf = self.grad_buf(grads, *x).unwrap();
                    gemm(rows, fan_out, fan_in, g, false, wv, true, buf, 1.0);
                }
                if self.rg(*w) {
                    let xv = &self.nodes[x.0].value;
                    let buf = self.grad_buf(grads, *w).unwrap();
                    gemm(fan_in, rows, fan_out, xv, true, g, false, buf, 1.0);
                }
                if let Some(buf) = b.and_then(|b| self.grad_buf(grads, b)) {
                    for row in g.chunks_exact(fan_out) {
                        axpy(buf, row, 1.0);
                    }
                }
            }
            Op::Embedding { table, ids, width } => {
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let o = id as usize * width;
                        axpy(&mut buf[o..o + width], &g[r * width..(r + 1) * width], 1.0);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                width,
            } => {
                let w = *width;
                if let Some(buf) = self.grad_buf(grads, *beta) {
                    for row in g.chunks_exact(w) {
                        axpy(buf, row, 1.0);
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *gamma) {
                    for (row, hrow) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                        for j in 0..w {
                            buf[j] += row[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gv = &self.nodes[gamma.0].value;
                    let buf = self.grad_buf(grads, *x).unwrap();
                    let mut dxhat = vec![0.0; w];
                    for (r, (row, hrow)) in g.chunks_exact(w).zip(xhat.chunks_exact(w)).enumerate()
                    {
                        for j in 0..w {
                            dxhat[j] = row[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / w as f64;
                        let m2 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        let out = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            out[j] += rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        let t = node.value[i];
                        buf[i] += g[i] * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        let s = node.value[i];
                        buf[i] += g[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        buf[i] += g[i] * scale[i];
                    }
                }
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads),
            Op::SelectRow {
                x,
                index,
                len,
                width,
            } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (b, &i) in index.iter().enumerate() {
                        let o = (b * len + i) * width;
                        axpy(&mut buf[o..o + width], &g[b * width..(b + 1) * width], 1.0);
                    }
                }
            }
            Op::MaskedMean {
                x,
                mask,
                len,
                width,
            } => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    let (len, width) = (*len, *width);
                    for b in 0..mask.len() / len {
                        let m = &mask[b * len..(b + 1) * len];
                        let n = m.iter().filter(|&&v| v == 1).count() as f64;
                        let gb = &g[b * width..(b + 1) * width];
                        for j in 0..len {
                            if m[j] == 1 {
                                axpy(&mut buf[(b * len + j) * width..][..width], gb, 1.0 / n);
                            }
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for r in 0..*rows {
                            axpy(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                                1.0,
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Bce { p, targets, eps } => {
                let pv = &self.nodes[p.0].value;
                if let Some(buf) = self.grad_buf(grads, *p) {
                    let n = targets.len() as f64;
                    for i in 0..pv.len() {
                        let q = pv[i];
                        if q < *eps || q > 1.0 - eps {
                            continue;
                        }
                        let y = targets[i];
                        buf[i] += g[0] * (-y / q + (1.0 - y) / (1.0 - q)) / n;
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (batch, len, heads, width) = (c.batch, c.len, c.heads, c.width);
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qv = &self.nodes[c.q.0].value;
        let kv = &self.nodes[c.k.0].value;
        let vv = &self.nodes[c.v.0].value;
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut ds = vec![0.0; len * len];
        let w = width as isize;
        let l = len as isize;
        for b in 0..batch {
            let mask = &c.key_mask[b * len..(b + 1) * len];
            if !mask.contains(&1) {
                continue;
            }
            for hd in 0..heads {
                let base = b * len * width + hd * d;
                let prob = &c.probs[(b * heads + hd) * len * len..][..len * len];
                let gh = &g[base..];
                ds.iter_mut().for_each(|v| *v = 0.0);
                // dP = dO V^T, dV += P^T dO
                gemm_strided(
                    len,
                    d,
                    len,
                    1.0,
                    gh,
                    (w, 1),
                    &vv[base..],
                    (1, w),
                    &mut ds,
                    (l, 1),
                );
                gemm_strided(
                    len,
                    len,
                    d,
                    1.0,
                    prob,
                    (1, l),
                    gh,
                    (w, 1),
                    &mut dv[base..],
                    (w, 1),
                );
                for (drow, prow) in ds.chunks_exact_mut(len).zip(prob.chunks_exact(len)) {
                    let pd: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, &p) in drow.iter_mut().zip(prow) {
                        *dv = p * (*dv - pd) * scale;
                    }
                }
                gemm_strided(
                    len,
                    len,
                    d,
                    1.0,
                    &ds,
                    (l, 1),
                    &kv[base..],
                    (w, 1),
                    &mut dq[base..],
                    (w, 1),
                );
                gemm_strided(
                    len,
                    len,
                    d,
                    1.0,
                    &ds,
                    (1, l),
                    &qv[base..],
                    (w, 1),
                    &mut dk[base..],
                    (w, 1),
                );
            }
        }
        for (var, d) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if let Some(buf) = self.grad_buf(grads, var) {
                axpy(buf, &d, 1.0);
            }
        }
    }
}

/// Parameter gradients from one backward pass. Parameters with no path to the
/// loss have no entry.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient for `id`, zeros if it received none.
    pub fn get_or_zeros(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; len])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<f64>)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    /// True iff every gradient reaching `id` is exactly zero (or none reached it).
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.params
            .get(&id)
            .is_none_or(|g| g.iter().all(|&v| v == 0.0))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_mean(targets: &[f64], probs: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for (&y, &p) in targets.iter().zip(probs) {
        let q = p.clamp(eps, 1.0 - eps);
        total += -y * q.ln() - (1.0 - y) * (1.0 - q).ln();
    }
    total / targets.len() as f64
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `c += alpha * op(a) @ op(b)` with `op(a)` `[m, k]` and `op(b)` `[k, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    alpha: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted above)
    // and the strides describe row-major layouts of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += alpha * a @ b` over strided views with `a` `[m, k]`, `b` `[k, n]` and
/// `c` `[m, n]`; strides are (row, column) in elements.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last =
        |r: usize, cl: usize, rs: isize, cs: isize| (r - 1) * rs as usize + (cl - 1) * cs as usize;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: strides are positive and the furthest element of each view is
    // in bounds (asserted above); `c` is a unique borrow so it aliases neither input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let ids = shapes
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                store.add(name, shape.clone(), data)
            })
            .collect();
        (store, ids)
    }

    /// Central-difference check of every parameter entry for a loss built by `f`.
    fn check<F>(store: &mut ParamStore, ids: &[ParamId], f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic: Vec<Vec<f64>> = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            let grads = g.backward(loss);
            ids.iter()
                .map(|&id| grads.get_or_zeros(id, store.get(id).data.len()))
                .collect()
        };
        let h = 1e-6;
        for (pi, &id) in ids.iter().enumerate() {
            for i in 0..store.get(id).data.len() {
                let orig = store.get(id).data[i];
                store.get_mut(id).data[i] = orig + h;
                let up = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l)[0]
                };
                store.get_mut(id).data[i] = orig - h;
                let down = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l)[0]
                };
                store.get_mut(id).data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[pi][i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "param {pi}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Reduce any tensor to a scalar with fixed pseudo-random weights so every element matters.
    fn probe(g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).len();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let flat = g.reshape(x, vec![1, n]);
        let wv = g.input(w, vec![n, 1]);
        let y = g.linear(flat, wv, None);
        g.reshape(y, vec![])
    }

    #[test]
    fn linear_layernorm_gelu_gradients() {
        let (mut store, ids) = store_with(
            &[
                ("x", vec![3, 4]),
                ("w", vec![4, 5]),
                ("b", vec![5]),
                ("g", vec![5]),
                ("beta", vec![5]),
            ],
            1,
        );
        let i = ids.clone();
        check(&mut store, &ids, move |g| {
            let x = g.param(i[0]);
            let w = g.param(i[1]);
            let b = g.param(i[2]);
            let y = g.linear(x, w, Some(b));
            let (ga, be) = (g.param(i[3]), g.param(i[4]));
            let y = g.layer_norm(y, ga, be);
            let y = g.gelu(y);
            let y = g.tanh(y);
            probe(g, y)
        });
    }

    #[test]
    fn attention_gradients_with_mask() {
        let (mut store, ids) = store_with(
            &[
                ("q", vec![2, 4, 6]),
                ("k", vec![2, 4, 6]),
                ("v", vec![2, 4, 6]),
            ],
            2,
        );
        let i = ids.clone();
        check(&mut store, &ids, move |g| {
            let (q, k, v) = (g.param(i[0]), g.param(i[1]), g.param(i[2]));
            let y = g.attention(q, k, v, &[1, 1, 0, 1, 1, 0, 0, 0], 2);
            probe(g, y)
        });
    }

    #[test]
    fn pooling_concat_bce_gradients() {
        let (mut store, ids) = store_with(
            &[("x", vec![2, 3, 2]), ("e", vec![6, 2]), ("w", vec![6, 1])],
            3,
        );
        let i = ids.clone();
        check(&mut store, &ids, move |g| {
            let x = g.param(i[0]);
            let m = g.masked_mean(x, &[1, 0, 1, 1, 1, 1]);
            let s = g.select_rows(x, &[2, 0]);
            let table = g.param(i[1]);
            let e = g.embedding(table, &[5, 1]);
            let e = g.scale(e, 0.5);
            let h = g.concat(&[m, s, e]);
            let w = g.param(i[2]);
            let logit = g.linear(h, w, None);
            let logit = g.reshape(logit, vec![2]);
            let p = g.sigmoid(logit);
            g.bce(p, &[1.0, 0.0], 1e-7)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let (store, ids) = store_with(&[("x", vec![2, 2])], 4);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let y = g.add(d, d);
        let y = g.reshape(y, vec![1, 4]);
        let w = g.input(vec![1.0; 4], vec![4, 1]);
        let l = g.linear(y, w, None);
        let l = g.reshape(l, vec![]);
        assert!(!g.requires_grad(l));
        let grads = g.backward(l);
        assert!(grads.get(ids[0]).is_none());
    }

    #[test]
    fn fully_masked_attention_rows_are_zero() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input((0..12).map(|v| v as f64).collect(), vec![1, 3, 4]);
        let y = g.attention(x, x, x, &[0, 0, 0], 2);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1000.0) <= 1.0);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(bce_mean(&[1.0], &[0.0], 1e-7).is_finite());
    }
}
