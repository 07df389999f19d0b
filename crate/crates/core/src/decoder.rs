//! Spatial and temporal query decoders, prediction heads and tube extraction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{AttentionScope, ModelConfig};
use crate::corpus::BoxCxCyWh;
use crate::encoder::sine_1d;
use crate::error::{Error, Result};
use crate::nn::{key_mask, Embedding, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamGroup, ParamStore};

/// Self-attention over queries, cross-attention to visual + text tokens, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, init, &format!("{}.norm1", name), d),
            self_attn: MultiHeadAttention::new(store, init, &format!("{}.self_attn", name), d, heads),
            norm2: LayerNorm::new(store, init, &format!("{}.norm2", name), d),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{}.cross_attn", name), d, heads),
            norm3: LayerNorm::new(store, init, &format!("{}.norm3", name), d),
            ffn: FeedForward::new(store, init, &format!("{}.ffn", name), d, 2 * d),
        }
    }
}

/// Decoder output with the attention maps of every block.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[N_v, D]`
    pub queries: Var,
    pub self_probs: Vec<Var>,
    pub cross_probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub query_pos: Option<Embedding>,
    pub final_norm: LayerNorm,
    pub scope: AttentionScope,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, cfg: &ModelConfig, n_frames: usize) -> Self {
        let mut init = Init::new(seed);
        init.group = ParamGroup::Head;
        let d = cfg.d_model;
        Self {
            blocks: (0..cfg.decoder_layers)
                .map(|i| DecoderBlock::new(store, &mut init, &format!("{}.{}", name, i), d, cfg.heads))
                .collect(),
            query_pos: cfg.query_pos.then(|| {
                let e = Embedding::new(store, &mut init, &format!("{}.query_pos", name), n_frames, d);
                let table = store.get_mut(e.table).value.data_mut();
                for (t, v) in table.iter_mut().zip(sine_1d(n_frames, d)) {
                    *t += v;
                }
                e
            }),
            final_norm: LayerNorm::new(store, &init, &format!("{}.norm", name), d),
            scope: cfg.decoder_scope,
        }
    }

    /// `queries: [N_v, D]`, `visual: [N_v, H*W, D]`, `text: [N_t, D]`.
    pub fn forward(&self, g: &mut Graph, queries: Var, visual: Var, text: Var, text_mask: &[bool]) -> Result<Decoded> {
        let vs = g.shape(visual).to_vec();
        let qs = g.shape(queries).to_vec();
        let ts = g.shape(text).to_vec();
        if vs.len() != 3 || qs != [vs[0], vs[2]] || ts.len() != 2 || ts[1] != vs[2] || ts[0] != text_mask.len() {
            return Err(Error::Shape(format!(
                "queries {:?}, visual {:?}, text {:?}",
                qs, vs, ts
            )));
        }
        let mut out = Decoded {
            queries,
            self_probs: Vec::new(),
            cross_probs: Vec::new(),
        };
        if self.blocks.is_empty() {
            return Ok(out);
        }
        let (n, hw, d) = (vs[0], vs[1], vs[2]);
        let nt = ts[0];
        if let Some(p) = &self.query_pos {
            if p.rows != n {
                return Err(Error::Shape(format!("{} query positions for {} frames", p.rows, n)));
            }
        }
        let pos = self.query_pos.as_ref().map(|p| p.all(g));
        let (memory, mask, q_shape) = match self.scope {
            AttentionScope::PerFrame => {
                let t = g.reshape(text, &[1, nt, d]);
                let t = g.select(t, 0, &vec![0; n]);
                let mut keep = vec![true; hw];
                keep.extend_from_slice(text_mask);
                (g.concat(&[visual, t], 1), key_mask(g, &keep), [n, 1, d])
            }
            AttentionScope::CrossFrame => {
                let v = g.reshape(visual, &[1, n * hw, d]);
                let t = g.reshape(text, &[1, nt, d]);
                let mut keep = vec![true; n * hw];
                keep.extend_from_slice(text_mask);
                (g.concat(&[v, t], 1), key_mask(g, &keep), [1, n, d])
            }
        };
        let mut x = g.reshape(queries, &[1, n, d]);
        for b in &self.blocks {
            let xp = match pos {
                Some(p) => g.add(x, p),
                None => x,
            };
            let h = b.norm1.forward(g, xp);
            let a = b.self_attn.forward(g, h, h, h, None);
            x = g.add(x, a.out);
            out.self_probs.push(a.probs);

            let xp = match pos {
                Some(p) => g.add(x, p),
                None => x,
            };
            let h = b.norm2.forward(g, xp);
            let h = g.reshape(h, &q_shape);
            let a = b.cross_attn.forward(g, h, memory, memory, Some(mask));
            let c = g.reshape(a.out, &[1, n, d]);
            x = g.add(x, c);
            out.cross_probs.push(a.probs);

            let h = b.norm3.forward(g, x);
            let f = b.ffn.forward(g, h);
            x = g.add(x, f);
        }
        let x = self.final_norm.forward(g, x);
        out.queries = g.reshape(x, &[n, d]);
        Ok(out)
    }
}

/// 3-layer MLP with sigmoid output: `[N_v, D] -> [N_v, 4]` boxes `(cx, cy, w, h)`.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub mlp: Mlp,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        Self {
            mlp: Mlp::new(store, init, "head.box", &[d, d, d, 4]),
        }
    }

    pub fn forward(&self, g: &mut Graph, q: Var) -> Var {
        let h = self.mlp.forward(g, q);
        g.sigmoid(h)
    }
}

/// Start/end logits over frames, softmax-normalised.
#[derive(Clone, Debug)]
pub struct SpanHead {
    pub start: Linear,
    pub end: Linear,
}

impl SpanHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        Self {
            start: Linear::new(store, init, "head.start", d, 1),
            end: Linear::new(store, init, "head.end", d, 1),
        }
    }

    /// `[N_v, D] -> (H_s, H_e)`, each `[N_v]`.
    pub fn forward(&self, g: &mut Graph, q: Var) -> (Var, Var) {
        let n = g.shape(q)[0];
        let s = self.start.forward(g, q);
        let s = g.reshape(s, &[n]);
        let e = self.end.forward(g, q);
        let e = g.reshape(e, &[n]);
        (g.softmax(s), g.softmax(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubePrediction {
    /// One box per frame, clamped to `[0, 1]`.
    pub boxes: Vec<BoxCxCyWh>,
    pub h_s: Vec<f64>,
    pub h_e: Vec<f64>,
    /// Inclusive.
    pub span: (usize, usize),
}

impl TubePrediction {
    pub fn tube(&self) -> &[BoxCxCyWh] {
        &self.boxes[self.span.0..=self.span.1]
    }
}

/// Best `(s, e)` with `s <= e` under `h_s[s] * h_e[e]`; ties go to the smallest `s`, then `e`.
pub fn best_span(h_s: &[f64], h_e: &[f64]) -> Result<(usize, usize)> {
    let n = h_s.len();
    if n == 0 || h_e.len() != n {
        return Err(Error::Shape(format!("{} start vs {} end probabilities", n, h_e.len())));
    }
    if h_s.iter().chain(h_e).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NonFinite("span probabilities"));
    }
    let mut suffix = vec![0.0; n];
    let mut m = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        m = m.max(h_e[i]);
        suffix[i] = m;
    }
    let best = (0..n).map(|s| h_s[s] * suffix[s]).fold(f64::NEG_INFINITY, f64::max);
    let s = (0..n).find(|&s| h_s[s] * suffix[s] == best).unwrap();
    let e = (s..n).find(|&e| h_s[s] * h_e[e] == best).unwrap();
    Ok((s, e))
}

pub fn extract_tube(boxes: &[BoxCxCyWh], h_s: &[f64], h_e: &[f64]) -> Result<TubePrediction> {
    if boxes.len() != h_s.len() {
        return Err(Error::Shape(format!("{} boxes for {} frames", boxes.len(), h_s.len())));
    }
    let span = best_span(h_s, h_e)?;
    let boxes = boxes
        .iter()
        .map(|b| {
            let mut c = *b;
            c.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            c
        })
        .collect();
    Ok(TubePrediction {
        boxes,
        h_s: h_s.to_vec(),
        h_e: h_e.to_vec(),
        span,
    })
}
