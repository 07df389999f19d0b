//! Attribute-aware spatial activation and object query generation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::{ActivationMode, AttributeHead, MethodConfig, ModelConfig};
use crate::corpus::BoxCxCyWh;
use crate::error::{Error, Result};
use crate::nn::{head_mean, CrossAttentionBlock, Linear, Mlp};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Mean of the subject tokens, `[1, D]`.
pub fn subject_feature(g: &mut Graph, text: Var, span: (usize, usize), text_mask: &[bool]) -> Result<Var> {
    let (s, e) = span;
    if s > e || e >= text_mask.len() {
        return Err(Error::Span {
            start: s,
            end: e,
            len: text_mask.len(),
        });
    }
    if !text_mask[s..=e].iter().all(|&m| m) {
        return Err(Error::Text(format!("subject span {:?} covers padding", span)));
    }
    let t = g.narrow(text, 0, s, e - s + 1);
    let t = g.mean_axis(t, 0);
    let d = g.shape(t)[0];
    Ok(g.reshape(t, &[1, d]))
}

/// Attribute scores and the spatial map behind them.
#[derive(Clone, Copy, Debug)]
pub struct Classified {
    /// `[|V|]`, per-frame predictions averaged.
    pub scores: Var,
    /// `[n_sel, H*W]`, rows sum to 1.
    pub map: Var,
    /// Attention of each cross-attention block.
    pub probs: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct AttributeBranch {
    pub blocks: Vec<CrossAttentionBlock>,
    pub head: Linear,
    pub heads: usize,
}

impl AttributeBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize, vocab: usize) -> Self {
        Self {
            blocks: (0..2)
                .map(|i| CrossAttentionBlock::new(store, init, &format!("{}.ca{}", name, i), d, heads))
                .collect(),
            head: Linear::new(store, init, &format!("{}.head", name), d, vocab.max(1)),
            heads,
        }
    }

    /// `query: [n_sel, D]`, `r: [n_sel, H*W, D]`.
    pub fn forward(&self, g: &mut Graph, query: Var, r: Var, kind: AttributeHead) -> Result<Classified> {
        let rs = g.shape(r).to_vec();
        if rs.len() != 3 || rs[0] == 0 {
            return Err(Error::Empty("no sampled frames"));
        }
        let (n, hw, d) = (rs[0], rs[1], rs[2]);
        let mut q = g.reshape(query, &[n, 1, d]);
        let mut probs = Vec::with_capacity(2);
        for b in &self.blocks {
            let a = b.forward(g, q, r, None);
            q = a.out;
            probs.push(a.probs);
        }
        let m = head_mean(g, probs[1], self.heads);
        let map = g.reshape(m, &[n, hw]);
        let logits = self.head.forward(g, q);
        let v = self.head.d_out;
        let logits = g.reshape(logits, &[n, v]);
        let per_frame = match kind {
            AttributeHead::Sigmoid => g.sigmoid(logits),
            AttributeHead::Softmax => g.softmax(logits),
        };
        let scores = g.mean_axis(per_frame, 0);
        Ok(Classified {
            scores,
            map,
            probs: [probs[0], probs[1]],
        })
    }
}

/// Per-position foreground classifier used by the instance-level variant.
#[derive(Clone, Debug)]
pub struct InstanceHead {
    pub mlp: Mlp,
}

/// Output of [`InstanceHead::forward`].
#[derive(Clone, Copy, Debug)]
pub struct InstanceMaps {
    /// `[n_sel, H*W]`
    pub logits: Var,
    /// Row-wise softmax of `logits`.
    pub map: Var,
}

impl InstanceHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            mlp: Mlp::new(store, init, name, &[d, d, 1]),
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, r: Var) -> InstanceMaps {
        let rs = g.shape(r).to_vec();
        let q = g.reshape(query, &[rs[0], 1, rs[2]]);
        let x = g.add(r, q);
        let h = self.mlp.forward(g, x);
        let logits = g.reshape(h, &[rs[0], rs[1]]);
        let map = g.softmax(logits);
        InstanceMaps { logits, map }
    }
}

/// `A[f, p, :] = M[f, p] * R[f, p, :]`.
pub fn activate(g: &mut Graph, m: Var, r: Var) -> Result<Var> {
    let (ms, rs) = (g.shape(m).to_vec(), g.shape(r).to_vec());
    if rs.len() != 3 || ms != rs[..2] {
        return Err(Error::Shape(format!("map {:?} vs features {:?}", ms, rs)));
    }
    let m = g.reshape(m, &[ms[0], ms[1], 1]);
    Ok(g.mul(r, m))
}

/// Mean over frames and positions, repeated `n_v` times: `[n_sel, H*W, D] -> [n_v, D]`.
pub fn make_queries(g: &mut Graph, a: Var, n_v: usize) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Empty("activation has no frames"));
    }
    let x = g.mean_axis(a, 0);
    let x = g.mean_axis(x, 0);
    let x = g.reshape(x, &[1, s[2]]);
    Ok(g.select(x, 0, &vec![0; n_v]))
}

/// Rasterise a normalised box onto an `h x w` grid: cells whose centre lies in the box,
/// or the cell holding the box centre if no centre does.
pub fn grid_mask(b: BoxCxCyWh, h: usize, w: usize) -> Vec<bool> {
    let (x0, x1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (y0, y1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let mut mask = vec![false; h * w];
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            mask[r * w + c] = cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1;
        }
    }
    if !mask.iter().any(|&m| m) {
        let r = ((b[1] * h as f64) as usize).min(h - 1);
        let c = ((b[0] * w as f64) as usize).min(w - 1);
        mask[r * w + c] = true;
    }
    mask
}

/// Queries pooled from encoder features inside the groundtruth boxes, `[n_v, D]`.
pub fn oracle_queries(
    g: &mut Graph,
    features: Var,
    gt_span: (usize, usize),
    gt_boxes: &[BoxCxCyWh],
    grid: (usize, usize),
) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let (n_v, d) = (s[0], s[2]);
    let (a, b) = gt_span;
    if a > b || b >= n_v {
        return Err(Error::Span {
            start: a,
            end: b,
            len: n_v,
        });
    }
    if gt_boxes.len() != b - a + 1 {
        return Err(Error::MissingGroundtruth(format!(
            "{} boxes for span {:?}",
            gt_boxes.len(),
            gt_span
        )));
    }
    let mut weights = Tensor::zeros(&[n_v, grid.0 * grid.1, 1]);
    let per_frame = 1.0 / gt_boxes.len() as f64;
    for (k, bx) in gt_boxes.iter().enumerate() {
        let mask = grid_mask(*bx, grid.0, grid.1);
        let cells = mask.iter().filter(|&&m| m).count() as f64;
        for (p, &m) in mask.iter().enumerate() {
            if m {
                weights.set(&[a + k, p, 0], per_frame / cells);
            }
        }
    }
    let w = g.constant(weights);
    let x = g.mul(features, w);
    let x = g.sum_axis(x, 0);
    let x = g.sum_axis(x, 0);
    let x = g.reshape(x, &[1, d]);
    Ok(g.select(x, 0, &vec![0; n_v]))
}

#[derive(Clone, Debug)]
pub struct ActivationOutput {
    /// Present when the branch classifies attributes.
    pub c_a: Option<Var>,
    pub c_m: Option<Var>,
    /// `[n_sel, H*W]`
    pub m_a: Var,
    pub m_m: Var,
    /// Instance-variant logits for the mask loss.
    pub instance_a: Option<Var>,
    pub instance_m: Option<Var>,
    pub q_s: Var,
    pub q_t: Var,
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SpatialActivator {
    pub appearance: Option<AttributeBranch>,
    pub motion: Option<AttributeBranch>,
    pub instance_a: Option<InstanceHead>,
    pub instance_m: Option<InstanceHead>,
    /// Stand-in for the subject feature when subject guidance is off.
    pub learned_query: Option<ParamId>,
    pub head_kind: AttributeHead,
}

impl SpatialActivator {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        model: &ModelConfig,
        method: &MethodConfig,
        vocab: (usize, usize),
    ) -> Self {
        let (d, h) = (model.d_model, model.heads);
        let attribute = method.activation == ActivationMode::Attribute;
        let instance = method.activation == ActivationMode::Instance;
        let mut init = Init::new(seed);
        init.group = ParamGroup::Head;
        let appearance = (attribute && method.asa.appearance)
            .then(|| AttributeBranch::new(store, &mut init, "asa.appearance", d, h, vocab.0));
        let mut init = Init::new(seed ^ 0x6d6f74);
        init.group = ParamGroup::Head;
        let motion = (attribute && method.asa.motion)
            .then(|| AttributeBranch::new(store, &mut init, "asa.motion", d, h, vocab.1));
        let mut init = Init::new(seed ^ 0x696e73);
        init.group = ParamGroup::Head;
        let instance_a = (instance && method.asa.appearance)
            .then(|| InstanceHead::new(store, &mut init, "asa.instance_appearance", d));
        let instance_m =
            (instance && method.asa.motion).then(|| InstanceHead::new(store, &mut init, "asa.instance_motion", d));
        let learned_query = (!method.asa.subject_guided)
            .then(|| store.add("asa.query", init.normal(&[1, d], 0.1), ParamGroup::Head));
        Self {
            appearance,
            motion,
            instance_a,
            instance_m,
            learned_query,
            head_kind: model.attribute_head,
        }
    }

    /// Classify attributes, activate the sampled features and build both query sets.
    pub fn forward(&self, g: &mut Graph, subject: Var, r_a: Var, r_m: Var, n_v: usize) -> Result<ActivationOutput> {
        let rs = g.shape(r_a).to_vec();
        if rs.len() != 3 || rs[0] == 0 {
            return Err(Error::Empty("no sampled frames"));
        }
        if g.shape(r_m) != rs.as_slice() {
            return Err(Error::Shape(format!("{:?} vs {:?}", rs, g.shape(r_m))));
        }
        let (n, hw) = (rs[0], rs[1]);
        let base = match self.learned_query {
            Some(id) => g.param(id),
            None => subject,
        };
        let query = g.select(base, 0, &vec![0; n]);
        let uniform = g.constant(Tensor::full(&[n, hw], 1.0 / hw as f64));
        let mut probs = Vec::new();
        let mut out = ActivationOutput {
            c_a: None,
            c_m: None,
            m_a: uniform,
            m_m: uniform,
            instance_a: None,
            instance_m: None,
            q_s: uniform,
            q_t: uniform,
            probs: Vec::new(),
        };
        if let Some(b) = &self.appearance {
            let c = b.forward(g, query, r_a, self.head_kind)?;
            out.c_a = Some(c.scores);
            out.m_a = c.map;
            probs.extend(c.probs);
        }
        if let Some(b) = &self.motion {
            let c = b.forward(g, query, r_m, self.head_kind)?;
            out.c_m = Some(c.scores);
            out.m_m = c.map;
            probs.extend(c.probs);
        }
        if let Some(h) = &self.instance_a {
            let m = h.forward(g, query, r_a);
            out.instance_a = Some(m.logits);
            out.m_a = m.map;
        }
        if let Some(h) = &self.instance_m {
            let m = h.forward(g, query, r_m);
            out.instance_m = Some(m.logits);
            out.m_m = m.map;
        }
        let a_a = activate(g, out.m_a, r_a)?;
        let a_m = activate(g, out.m_m, r_m)?;
        out.q_s = make_queries(g, a_a, n_v)?;
        out.q_t = make_queries(g, a_m, n_v)?;
        out.probs = probs;
        Ok(out)
    }
}
