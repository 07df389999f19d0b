//! Text-guided temporal sampling: per-frame relevance scores and frame selection.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::{MethodConfig, ModelConfig};
use crate::encoder::Segments;
use crate::error::{Error, Result};
use crate::nn::{CrossAttentionBlock, Mlp};
use crate::params::{Init, ParamGroup, ParamStore};

/// Spatially pooled features.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// `[N_v, D]`
    pub appearance: Var,
    /// `[N_v, D]`
    pub motion: Var,
    /// `[1, D]`
    pub text: Var,
}

/// Spatial mean of both visual streams and the mean of the real text tokens.
pub fn pool_features(g: &mut Graph, seg: &Segments, text_mask: &[bool]) -> Result<Pooled> {
    let real: Vec<usize> = text_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if real.is_empty() {
        return Err(Error::Empty("text has no real tokens"));
    }
    if text_mask.len() != g.shape(seg.text)[0] {
        return Err(Error::Shape(format!(
            "text mask of {} for {} tokens",
            text_mask.len(),
            g.shape(seg.text)[0]
        )));
    }
    let appearance = g.mean_axis(seg.appearance, 1);
    let motion = g.mean_axis(seg.motion, 1);
    let t = g.select(seg.text, 0, &real);
    let t = g.mean_axis(t, 0);
    let d = g.shape(t)[0];
    let text = g.reshape(t, &[1, d]);
    Ok(Pooled {
        appearance,
        motion,
        text,
    })
}

/// One scoring branch: two cross-attention blocks against the text, then an MLP.
#[derive(Clone, Debug)]
pub struct ScoreBranch {
    pub blocks: Vec<CrossAttentionBlock>,
    pub mlp: Mlp,
}

impl ScoreBranch {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            blocks: (0..2)
                .map(|i| CrossAttentionBlock::new(store, init, &format!("{}.ca{}", name, i), d, heads))
                .collect(),
            mlp: Mlp::new(store, init, &format!("{}.mlp", name), &[d, d, 1]),
        }
    }

    /// `[N_v, D] -> [N_v]` scores in (0, 1), plus the attention maps of each block.
    pub fn forward(&self, g: &mut Graph, frames: Var, text: Option<Var>) -> (Var, Vec<Var>) {
        let s = g.shape(frames).to_vec();
        let mut q = g.reshape(frames, &[1, s[0], s[1]]);
        let mut probs = Vec::new();
        if let Some(t) = text {
            let kv = g.reshape(t, &[1, 1, s[1]]);
            for b in &self.blocks {
                let a = b.forward(g, q, kv, None);
                q = a.out;
                probs.push(a.probs);
            }
        }
        let h = self.mlp.forward(g, q);
        let h = g.sigmoid(h);
        (g.reshape(h, &[s[0]]), probs)
    }
}

#[derive(Clone, Debug)]
pub struct TemporalSampler {
    pub appearance: Option<ScoreBranch>,
    pub motion: Option<ScoreBranch>,
}

/// Relevance scores of the active branches.
#[derive(Clone, Debug)]
pub struct Scores {
    pub s_a: Option<Var>,
    pub s_m: Option<Var>,
    pub probs: Vec<Var>,
}

impl TemporalSampler {
    pub fn new(store: &mut ParamStore, seed: u64, model: &ModelConfig, method: &MethodConfig) -> Self {
        let mut init = Init::new(seed);
        init.group = ParamGroup::Head;
        let (d, h) = (model.d_model, model.heads);
        let appearance = method
            .tts
            .appearance
            .then(|| ScoreBranch::new(store, &mut init, "tts.appearance", d, h));
        let mut init = Init::new(seed ^ 0x6d6f74);
        init.group = ParamGroup::Head;
        let motion = method
            .tts
            .motion
            .then(|| ScoreBranch::new(store, &mut init, "tts.motion", d, h));
        Self { appearance, motion }
    }

    pub fn relevance_scores(&self, g: &mut Graph, pooled: &Pooled, text_guided: bool) -> Scores {
        let text = text_guided.then_some(pooled.text);
        let mut probs = Vec::new();
        let s_a = self.appearance.as_ref().map(|b| {
            let (s, p) = b.forward(g, pooled.appearance, text);
            probs.extend(p);
            s
        });
        let s_m = self.motion.as_ref().map(|b| {
            let (s, p) = b.forward(g, pooled.motion, text);
            probs.extend(p);
            s
        });
        Scores { s_a, s_m, probs }
    }
}

/// `delta * s_a + (1 - delta) * s_m`.
pub fn fuse_scores(s_a: &[f64], s_m: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Range(format!("delta {} outside [0, 1]", delta)));
    }
    if s_a.len() != s_m.len() {
        return Err(Error::Shape(format!("{} vs {} scores", s_a.len(), s_m.len())));
    }
    Ok(s_a
        .iter()
        .zip(s_m)
        .map(|(&a, &m)| delta * a + (1.0 - delta) * m)
        .collect())
}

/// Frames with `s > theta` in order; the single argmax frame when none qualifies.
pub fn select_frames(s: &[f64], theta: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..s.len()).filter(|&i| s[i] > theta).collect();
    if !picked.is_empty() || s.is_empty() {
        return picked;
    }
    let mut best = 0;
    for i in 1..s.len() {
        if s[i] > s[best] {
            best = i;
        }
    }
    alloc::vec![best]
}

#[derive(Clone, Debug)]
pub struct RelevanceOutput {
    pub s_a: Vec<f64>,
    pub s_m: Vec<f64>,
    pub s: Vec<f64>,
    pub indices: Vec<usize>,
    /// `[n_sel, H*W, D]`
    pub r_a: Var,
    /// `[n_sel, H*W, D]`
    pub r_m: Var,
}

/// Select the same frames from both streams.
pub fn sample_frames(
    g: &mut Graph,
    fa: Var,
    fm: Var,
    s_a: Vec<f64>,
    s_m: Vec<f64>,
    s: Vec<f64>,
    theta: f64,
) -> Result<RelevanceOutput> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Range(format!("theta {} outside (0, 1)", theta)));
    }
    if s.len() != g.shape(fa)[0] || s.len() != g.shape(fm)[0] {
        return Err(Error::Shape(format!("{} scores for {} frames", s.len(), g.shape(fa)[0])));
    }
    let indices = select_frames(&s, theta);
    let r_a = g.select(fa, 0, &indices);
    let r_m = g.select(fm, 0, &indices);
    Ok(RelevanceOutput {
        s_a,
        s_m,
        s,
        indices,
        r_a,
        r_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sampler() -> (ParamStore, TemporalSampler) {
        let mut store = ParamStore::new();
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            ..ModelConfig::desk()
        };
        let t = TemporalSampler::new(&mut store, 3, &cfg, &MethodConfig::default());
        (store, t)
    }

    #[test]
    fn pooling_means() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let appearance = g.constant(Tensor::full(&[3, 4, 2], 0.25));
        let motion = g.constant(Tensor::from_fn(&[3, 4, 2], |i| i as f64));
        let text = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let seg = Segments {
            appearance,
            motion,
            text,
        };
        let p = pool_features(&mut g, &seg, &[false, true, false]).unwrap();
        assert!(g.value(p.appearance).data().iter().all(|&x| x == 0.25));
        assert_eq!(g.shape(p.motion), &[3, 2]);
        assert_eq!(g.value(p.motion).data()[..2], [3.0, 4.0]);
        assert_eq!(g.value(p.text).data(), &[2.0, 3.0]);
        assert!(pool_features(&mut g, &seg, &[false; 3]).is_err());
    }

    #[test]
    fn scores_are_probabilities_and_frame_equivariant() {
        let (store, t) = sampler();
        let mut g = Graph::new(&store);
        let fa = Tensor::from_fn(&[5, 8], |i| ((i * 37) % 11) as f64 / 7.0 - 0.5);
        let perm = [3, 0, 4, 1, 2];
        let mut pa = Tensor::zeros(&[5, 8]);
        for (k, &p) in perm.iter().enumerate() {
            pa.data_mut()[k * 8..(k + 1) * 8].copy_from_slice(fa.row(p));
        }
        let text = g.constant(Tensor::from_fn(&[1, 8], |i| i as f64 / 8.0));
        let run = |g: &mut Graph, x: &Tensor| {
            let v = g.constant(x.clone());
            let pooled = Pooled {
                appearance: v,
                motion: v,
                text,
            };
            let s = t.relevance_scores(g, &pooled, true);
            for p in &s.probs {
                assert!(g.value(*p).data().iter().all(|&w| (w - 1.0).abs() < 1e-12));
            }
            g.value(s.s_a.unwrap()).data().to_vec()
        };
        let a = run(&mut g, &fa);
        let b = run(&mut g, &pa);
        assert!(a.iter().all(|&x| x > 0.0 && x < 1.0));
        for (k, &p) in perm.iter().enumerate() {
            assert!((b[k] - a[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_arithmetic() {
        let s = fuse_scores(&[0.8, 0.2], &[0.4, 0.6], 0.5).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.4).abs() < 1e-15);
        assert_eq!(fuse_scores(&[0.3, 0.9], &[0.1, 0.2], 1.0).unwrap(), [0.3, 0.9]);
        assert!(fuse_scores(&[0.3], &[0.1], 1.5).is_err());
        assert!(fuse_scores(&[0.3], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_frames(&[0.9, 0.5, 0.8], 0.7), [0, 2]);
        assert_eq!(select_frames(&[0.1, 0.6, 0.7], 0.7), [2]);
        assert_eq!(select_frames(&[0.1, 0.6, 0.3], 0.7), [1]);
        assert_eq!(select_frames(&[0.7, 0.7], 0.7), [0]);
    }

    #[test]
    fn sampled_streams_align() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let fa = g.constant(Tensor::from_fn(&[3, 2, 1], |i| i as f64));
        let fm = g.constant(Tensor::from_fn(&[3, 2, 1], |i| -(i as f64)));
        let out = sample_frames(&mut g, fa, fm, alloc::vec![], alloc::vec![], alloc::vec![0.9, 0.5, 0.8], 0.7)
            .unwrap();
        assert_eq!(out.indices, [0, 2]);
        assert_eq!(g.value(out.r_a).data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g.value(out.r_m).data(), &[0.0, -1.0, -4.0, -5.0]);
        assert!(sample_frames(&mut g, fa, fm, alloc::vec![], alloc::vec![], alloc::vec![0.9; 3], 1.0).is_err());
    }
}
