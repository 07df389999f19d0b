//! Transformer building blocks on top of the autodiff tape.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{}.weight", name), init.glorot(d_in, d_out), init.group);
        let bias = store.add(format!("{}.bias", name), Tensor::zeros(&[d_out]), init.group);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{}.gain", name), Tensor::full(&[d], 1.0), init.group);
        let bias = store.add(format!("{}.bias", name), Tensor::zeros(&[d]), init.group);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let h = g.mul(n, gain);
        g.add(h, bias)
    }
}

/// Two-layer ReLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{}.up", name), d, hidden),
            down: Linear::new(store, init, &format!("{}.down", name), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// ReLU MLP with `dims.len() - 1` linear layers and no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{}.{}", name, i), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, rows: usize, dim: usize) -> Self {
        let table = store.add(format!("{}.table", name), init.normal(&[rows, dim], 0.1), init.group);
        Self { table, rows, dim }
    }

    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.select(t, 0, ids)
    }

    pub fn all(&self, g: &mut Graph) -> Var {
        g.param(self.table)
    }
}

/// Output of [`MultiHeadAttention::forward`].
pub struct Attended {
    pub out: Var,
    /// Attention probabilities `[batch * heads, n_query, n_key]`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "d={} not divisible by heads={}", d, heads);
        Self {
            q: Linear::new(store, init, &format!("{}.q", name), d, d),
            k: Linear::new(store, init, &format!("{}.k", name), d, d),
            v: Linear::new(store, init, &format!("{}.v", name), d, d),
            o: Linear::new(store, init, &format!("{}.o", name), d, d),
            heads,
            d,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let dh = self.d / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, n, dh])
    }

    /// Scaled dot-product attention over `[batch, n, d]` inputs.
    ///
    /// `mask` is an additive constant broadcastable to
    /// `[batch * heads, n_query, n_key]`; use `-inf` to exclude keys.
    pub fn forward(&self, g: &mut Graph, query: Var, key: Var, value: Var, mask: Option<Var>) -> Attended {
        let bq = g.shape(query)[0];
        let nq = g.shape(query)[1];
        let dh = self.d / self.heads;
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64));
        let scores = match mask {
            Some(m) => g.add(scores, m),
            None => scores,
        };
        let probs = g.softmax(scores);
        let ctx = g.bmm(probs, v, false);
        let ctx = g.reshape(ctx, &[bq, self.heads, nq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[bq, nq, self.d]);
        let out = self.o.forward(g, ctx);
        Attended { out, probs }
    }
}

/// Additive key mask `[1, 1, n_key]`: 0 for kept keys, `-inf` for dropped ones.
pub fn key_mask(g: &mut Graph, keep: &[bool]) -> Var {
    let data = keep
        .iter()
        .map(|&k| if k { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    g.constant(Tensor::new(&[1, 1, keep.len()], data))
}

/// Pre-norm self-attention block: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, init, &format!("{}.norm1", name), d),
            attn: MultiHeadAttention::new(store, init, &format!("{}.attn", name), d, heads),
            norm2: LayerNorm::new(store, init, &format!("{}.norm2", name), d),
            ffn: FeedForward::new(store, init, &format!("{}.ffn", name), d, 2 * d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<Var>) -> Attended {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h, h, h, mask);
        let x = g.add(x, a.out);
        let h = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, h);
        Attended {
            out: g.add(x, f),
            probs: a.probs,
        }
    }
}

/// Pre-norm cross-attention block: `z + CA(LN(z), u)`, then `z + FFN(LN(z))`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, init, &format!("{}.norm1", name), d),
            attn: MultiHeadAttention::new(store, init, &format!("{}.attn", name), d, heads),
            norm2: LayerNorm::new(store, init, &format!("{}.norm2", name), d),
            ffn: FeedForward::new(store, init, &format!("{}.ffn", name), d, 2 * d),
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var, memory: Var, mask: Option<Var>) -> Attended {
        let h = self.norm1.forward(g, z);
        let a = self.attn.forward(g, h, memory, memory, mask);
        let z = g.add(z, a.out);
        let h = self.norm2.forward(g, z);
        let f = self.ffn.forward(g, h);
        Attended {
            out: g.add(z, f),
            probs: a.probs,
        }
    }
}

/// Non-overlapping strided convolution (kernel = stride = `patch`) over NHWC input.
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchConv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        patch: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, init, name, patch * patch * c_in, c_out),
            patch,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let p = self.patch;
        assert!(h % p == 0 && w % p == 0, "{}x{} not divisible by patch {}", h, w, p);
        let x = g.reshape(x, &[n, h / p, p, w / p, p, c]);
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
        let x = g.reshape(x, &[n, h / p, w / p, p * p * c]);
        self.proj.forward(g, x)
    }
}

/// Average over heads of attention probabilities `[batch * heads, nq, nk] -> [batch, nq, nk]`.
pub fn head_mean(g: &mut Graph, probs: Var, heads: usize) -> Var {
    let s = g.shape(probs).to_vec();
    let p = g.reshape(probs, &[s[0] / heads, heads, s[1], s[2]]);
    g.mean_axis(p, 1)
}
