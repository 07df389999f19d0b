//! Feature stubs, multimodal fusion and the self-attention encoder.
//!
//! Per frame the fused sequence is laid out as
//! `[appearance (H*W) | motion (H*W) | text (N_t)]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::{AttentionScope, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{key_mask, Embedding, LayerNorm, Linear, PatchConv, SelfAttentionBlock};
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Two strided convolutions with ReLU; no temporal mixing.
#[derive(Clone, Debug)]
pub struct ConvStub {
    pub conv1: PatchConv,
    pub conv2: PatchConv,
}

impl ConvStub {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig, c_out: usize) -> Self {
        Self {
            conv1: PatchConv::new(store, init, &format!("{}.conv1", name), 3, cfg.stem_channels, cfg.patch1),
            conv2: PatchConv::new(
                store,
                init,
                &format!("{}.conv2", name),
                cfg.stem_channels,
                c_out,
                cfg.patch2,
            ),
        }
    }

    /// `[N, H_px, W_px, 3] -> [N, H, W, C]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        g.relu(h)
    }
}

/// Temporal differences `frame[i] - frame[i-1]`, zero at `i = 0`.
pub fn frame_differences(frames: &Tensor) -> Tensor {
    let n = frames.dim(0);
    let w = frames.numel() / n.max(1);
    let mut out = Tensor::zeros(frames.shape());
    let src = frames.data();
    let dst = out.data_mut();
    for i in 1..n {
        for j in 0..w {
            dst[i * w + j] = src[i * w + j] - src[(i - 1) * w + j];
        }
    }
    out
}

fn check_frames(frames: &Tensor) -> Result<()> {
    if frames.rank() != 4 || frames.dim(3) != 3 {
        return Err(Error::Shape(format!("frames must be [N, H, W, 3], got {:?}", frames.shape())));
    }
    if !frames.all_finite() {
        return Err(Error::NonFinite("frames"));
    }
    Ok(())
}

/// Learned word embeddings plus one self-attention block.
#[derive(Clone, Debug)]
pub struct TextStub {
    pub words: Embedding,
    pub pos: Embedding,
    pub block: SelfAttentionBlock,
}

impl TextStub {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, vocab_rows: usize) -> Self {
        Self {
            words: Embedding::new(store, init, "text.words", vocab_rows, cfg.c_text),
            pos: Embedding::new(store, init, "text.pos", cfg.n_tokens, cfg.c_text),
            block: SelfAttentionBlock::new(store, init, "text.block", cfg.c_text, cfg.heads),
        }
    }
}

/// Segment layout of one frame's token row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_frames: usize,
    pub grid: usize,
    pub n_text: usize,
}

impl Layout {
    pub fn row_len(&self) -> usize {
        2 * self.grid + self.n_text
    }

    /// Type index per token: 0 appearance, 1 motion, 2 text.
    pub fn types(&self) -> Vec<usize> {
        let mut t = vec![0; self.grid];
        t.extend(vec![1; self.grid]);
        t.extend(vec![2; self.n_text]);
        t
    }
}

/// Fused tokens `[N_v, 2*H*W + N_t, D]` with their layout.
#[derive(Clone, Debug)]
pub struct MultimodalFeature {
    pub tokens: Var,
    pub layout: Layout,
    /// `true` for real text tokens.
    pub text_mask: Vec<bool>,
}

/// Encoder output split back into its segments.
#[derive(Clone, Copy, Debug)]
pub struct Segments {
    /// `[N_v, H*W, D]`
    pub appearance: Var,
    /// `[N_v, H*W, D]`
    pub motion: Var,
    /// `[N_t, D]`, frame-averaged.
    pub text: Var,
}

#[derive(Clone, Debug)]
pub struct MultimodalEncoder {
    pub appearance: ConvStub,
    pub motion: ConvStub,
    pub text: TextStub,
    pub proj_app: Linear,
    pub proj_mot: Linear,
    pub proj_text: Linear,
    pub pos: Embedding,
    pub typ: Embedding,
    pub blocks: Vec<SelfAttentionBlock>,
    pub final_norm: LayerNorm,
    pub scope: AttentionScope,
    pub heads: usize,
}

/// Sine/cosine encoding of positions `0..n`, `[n, d]` row-major.
pub fn sine_1d(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for (p, row) in out.chunks_mut(d.max(1)).enumerate() {
        for k in 0..d / 2 {
            let a = (p as f64 + 0.5) * libm::pow(100.0, -((2 * k) as f64) / d as f64);
            row[2 * k] = libm::sin(a);
            row[2 * k + 1] = libm::cos(a);
        }
    }
    out
}

/// 2D sine/cosine encoding of an `h x w` grid, `[h*w, d]` row-major.
pub fn sine_grid(h: usize, w: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for (axis, p) in [(0, y), (half, x)] {
                for k in 0..half / 2 {
                    let freq = libm::pow(100.0, -((2 * k) as f64) / half as f64);
                    let a = (p as f64 + 0.5) * freq;
                    row[axis + 2 * k] = libm::sin(a);
                    row[axis + 2 * k + 1] = libm::cos(a);
                }
            }
        }
    }
    out
}

impl MultimodalEncoder {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        cfg: &ModelConfig,
        grid: (usize, usize),
        vocab_rows: usize,
    ) -> Self {
        let mut init = Init::new(seed);
        init.group = ParamGroup::Backbone;
        let appearance = ConvStub::new(store, &mut init, "stub.appearance", cfg, cfg.c_app);
        init.group = ParamGroup::MotionBackbone;
        let motion = ConvStub::new(store, &mut init, "stub.motion", cfg, cfg.c_mot);
        init.group = ParamGroup::Backbone;
        let text = TextStub::new(store, &mut init, cfg, vocab_rows);
        init.group = ParamGroup::Head;
        let d = cfg.d_model;
        let cells = grid.0 * grid.1;
        let row = 2 * cells + cfg.n_tokens;
        let pos = Embedding::new(store, &mut init, "fuse.pos", row, d);
        let sine = sine_grid(grid.0, grid.1, d);
        let table = &mut store.get_mut(pos.table).value;
        for (i, v) in sine.iter().enumerate() {
            // appearance and motion cells share the grid encoding
            table.data_mut()[i] += v;
            table.data_mut()[cells * d + i] += v;
        }
        Self {
            appearance,
            motion,
            text,
            proj_app: Linear::new(store, &mut init, "fuse.proj_app", cfg.c_app, d),
            proj_mot: Linear::new(store, &mut init, "fuse.proj_mot", cfg.c_mot, d),
            proj_text: Linear::new(store, &mut init, "fuse.proj_text", cfg.c_text, d),
            pos,
            typ: Embedding::new(store, &mut init, "fuse.type", 3, d),
            blocks: (0..cfg.encoder_layers)
                .map(|i| SelfAttentionBlock::new(store, &mut init, &format!("encoder.{}", i), d, cfg.heads))
                .collect(),
            final_norm: LayerNorm::new(store, &init, "encoder.norm", d),
            scope: cfg.encoder_scope,
            heads: cfg.heads,
        }
    }

    /// Appearance features `[N_v, H, W, C_a]`.
    pub fn extract_appearance(&self, g: &mut Graph, frames: &Tensor) -> Result<Var> {
        check_frames(frames)?;
        let x = g.constant(frames.clone());
        Ok(self.appearance.forward(g, x))
    }

    /// Motion features `[N_v, H, W, C_m]` computed from frame differences.
    pub fn extract_motion(&self, g: &mut Graph, frames: &Tensor) -> Result<Var> {
        check_frames(frames)?;
        if frames.dim(0) < 2 {
            return Err(Error::Shape("motion features need at least 2 frames".into()));
        }
        let x = g.constant(frame_differences(frames));
        Ok(self.motion.forward(g, x))
    }

    /// Text features `[N_t, C_t]`; pad keys are masked out of attention.
    pub fn embed_text(&self, g: &mut Graph, ids: &[usize], mask: &[bool]) -> Result<Var> {
        if ids.len() != self.text.pos.rows || mask.len() != ids.len() {
            return Err(Error::Shape(format!(
                "expected {} token ids, got {}",
                self.text.pos.rows,
                ids.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Empty("text has no real tokens"));
        }
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < self.text.words.rows { i } else { 1 })
            .collect();
        let w = self.text.words.lookup(g, &ids);
        let p = self.text.pos.all(g);
        let x = g.add(w, p);
        let n = ids.len();
        let x = g.reshape(x, &[1, n, self.text.words.dim]);
        let m = key_mask(g, mask);
        let out = self.text.block.forward(g, x, Some(m)).out;
        Ok(g.reshape(out, &[n, self.text.words.dim]))
    }

    /// Project, flatten and concatenate the three streams, then add position and type embeddings.
    pub fn fuse(&self, g: &mut Graph, fa: Var, fm: Var, ft: Var, text_mask: &[bool]) -> Result<MultimodalFeature> {
        let (sa, sm) = (g.shape(fa).to_vec(), g.shape(fm).to_vec());
        if sa.len() != 4 || sm.len() != 4 || sa[..3] != sm[..3] {
            return Err(Error::Shape(format!("appearance {:?} vs motion {:?}", sa, sm)));
        }
        let (n, grid) = (sa[0], sa[1] * sa[2]);
        let n_text = g.shape(ft)[0];
        let d = self.proj_app.d_out;
        let a = self.proj_app.forward(g, fa);
        let a = g.reshape(a, &[n, grid, d]);
        let m = self.proj_mot.forward(g, fm);
        let m = g.reshape(m, &[n, grid, d]);
        let t = self.proj_text.forward(g, ft);
        let t = g.reshape(t, &[1, n_text, d]);
        let t = g.select(t, 0, &vec![0; n]);
        let tokens = g.concat(&[a, m, t], 1);
        let layout = Layout {
            n_frames: n,
            grid,
            n_text,
        };
        if layout.row_len() != self.pos.rows {
            return Err(Error::Shape(format!(
                "token row of {} does not match {} position embeddings",
                layout.row_len(),
                self.pos.rows
            )));
        }
        let pos = self.pos.all(g);
        let typ = self.typ.lookup(g, &layout.types());
        let tokens = g.add(tokens, pos);
        let tokens = g.add(tokens, typ);
        Ok(MultimodalFeature {
            tokens,
            layout,
            text_mask: text_mask.to_vec(),
        })
    }

    fn row_mask(&self, g: &mut Graph, f: &MultimodalFeature) -> Var {
        let mut keep = vec![true; 2 * f.layout.grid];
        keep.extend_from_slice(&f.text_mask);
        if self.scope == AttentionScope::CrossFrame {
            let row = keep.clone();
            for _ in 1..f.layout.n_frames {
                keep.extend_from_slice(&row);
            }
        }
        key_mask(g, &keep)
    }

    /// Self-attention encoder; returns the encoded tokens and each block's attention.
    pub fn encode(&self, g: &mut Graph, f: &MultimodalFeature) -> (Var, Vec<Var>) {
        if self.blocks.is_empty() {
            return (f.tokens, Vec::new());
        }
        let shape = g.shape(f.tokens).to_vec();
        let mut x = match self.scope {
            AttentionScope::PerFrame => f.tokens,
            AttentionScope::CrossFrame => g.reshape(f.tokens, &[1, shape[0] * shape[1], shape[2]]),
        };
        let mask = self.row_mask(g, f);
        let mut probs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = b.forward(g, x, Some(mask));
            x = a.out;
            probs.push(a.probs);
        }
        let x = self.final_norm.forward(g, x);
        (g.reshape(x, &shape), probs)
    }
}

/// Split encoded tokens into appearance, motion and (frame-averaged) text segments.
pub fn deconcat(g: &mut Graph, tokens: Var, layout: &Layout) -> Result<Segments> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[0] != layout.n_frames || s[1] != layout.row_len() {
        return Err(Error::Shape(format!("tokens {:?} do not match layout {:?}", s, layout)));
    }
    let appearance = g.narrow(tokens, 1, 0, layout.grid);
    let motion = g.narrow(tokens, 1, layout.grid, layout.grid);
    let text = g.narrow(tokens, 1, 2 * layout.grid, layout.n_text);
    // mean = x_0 + mean_i(x_i - x_0): exact when all frame copies agree
    let first = g.narrow(text, 0, 0, 1);
    let diff = g.sub(text, first);
    let mean_diff = g.mean_axis(diff, 0);
    let first = g.reshape(first, &[layout.n_text, s[2]]);
    let text = g.add(first, mean_diff);
    Ok(Segments {
        appearance,
        motion,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(layers: usize) -> (ParamStore, MultimodalEncoder, ModelConfig) {
        let cfg = ModelConfig {
            encoder_layers: layers,
            ..ModelConfig::desk()
        };
        let mut store = ParamStore::new();
        let enc = MultimodalEncoder::new(&mut store, 5, &cfg, (4, 4), 10);
        (store, enc, cfg)
    }

    fn frames(n: usize, seed: usize) -> Tensor {
        Tensor::from_fn(&[n, 32, 32, 3], |i| (((i + seed) * 2654435761) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn stubs_produce_grid_features() {
        let (store, enc, _) = setup(1);
        let mut g = Graph::new(&store);
        let fa = enc.extract_appearance(&mut g, &frames(3, 0)).unwrap();
        assert_eq!(g.shape(fa), &[3, 4, 4, 32]);
        let fm = enc.extract_motion(&mut g, &frames(3, 0)).unwrap();
        assert_eq!(g.shape(fm), &[3, 4, 4, 32]);
    }

    #[test]
    fn appearance_is_per_frame() {
        let (store, enc, _) = setup(1);
        let mut g = Graph::new(&store);
        let one = frames(1, 3);
        let mut two = Tensor::zeros(&[2, 32, 32, 3]);
        two.data_mut()[..one.numel()].copy_from_slice(one.data());
        two.data_mut()[one.numel()..].copy_from_slice(one.data());
        let fa = enc.extract_appearance(&mut g, &two).unwrap();
        let v = g.value(fa);
        assert_eq!(v.row(0), v.row(1));

        let zeros = Tensor::zeros(&[2, 32, 32, 3]);
        let fz = enc.extract_appearance(&mut g, &zeros).unwrap();
        assert!(g.value(fz).all_finite());
        // bias response: zero biases give exactly zero features
        assert!(g.value(fz).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn motion_stub_sees_only_differences() {
        let (store, enc, _) = setup(1);
        let mut g = Graph::new(&store);
        let one = frames(1, 1);
        let mut stat = Tensor::zeros(&[4, 32, 32, 3]);
        for i in 0..4 {
            stat.data_mut()[i * one.numel()..(i + 1) * one.numel()].copy_from_slice(one.data());
        }
        let fm = enc.extract_motion(&mut g, &stat).unwrap();
        let v = g.value(fm).clone();
        for i in 1..4 {
            assert_eq!(v.row(i), v.row(0));
        }
        assert!(enc.extract_motion(&mut g, &frames(1, 0)).is_err());
        let mut bad = frames(2, 0);
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(enc.extract_motion(&mut g, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reversed_video_changes_motion_features() {
        let (store, enc, _) = setup(1);
        let mut g = Graph::new(&store);
        let f = frames(4, 2);
        let w = f.numel() / 4;
        let mut rev = Tensor::zeros(f.shape());
        for i in 0..4 {
            rev.data_mut()[i * w..(i + 1) * w].copy_from_slice(f.row(3 - i));
        }
        let a = enc.extract_motion(&mut g, &f).unwrap();
        let b = enc.extract_motion(&mut g, &rev).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
    }

    #[test]
    fn text_stub_masks_pads_and_uses_positions() {
        let (store, enc, cfg) = setup(1);
        let mut g = Graph::new(&store);
        let mask = [true, true, true, true, false, false, false, false];
        let a = enc.embed_text(&mut g, &[2, 3, 4, 5, 0, 0, 0, 0], &mask).unwrap();
        let b = enc.embed_text(&mut g, &[2, 3, 4, 5, 0, 0, 0, 0], &mask).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let c = enc.embed_text(&mut g, &[2, 4, 3, 5, 0, 0, 0, 0], &mask).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(c)) > 1e-9);
        // out-of-vocabulary ids fall back to <unk>
        let d = enc.embed_text(&mut g, &[2, 3, 4, 99, 0, 0, 0, 0], &mask).unwrap();
        let e = enc.embed_text(&mut g, &[2, 3, 4, 1, 0, 0, 0, 0], &mask).unwrap();
        assert_eq!(g.value(d), g.value(e));
        assert_eq!(g.shape(a), &[cfg.n_tokens, cfg.c_text]);
        assert!(enc.embed_text(&mut g, &[0; 8], &[false; 8]).is_err());
    }

    #[test]
    fn layout_round_trips_through_deconcat() {
        let (mut store, enc, _) = setup(0);
        // zero embeddings so the fused tokens are the bare projections
        let pos = enc.pos.table;
        let typ = enc.typ.table;
        store.get_mut(pos).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        store.get_mut(typ).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::new(&store);
        let f = frames(3, 4);
        let fa = enc.extract_appearance(&mut g, &f).unwrap();
        let fm = enc.extract_motion(&mut g, &f).unwrap();
        let mask = [true; 8];
        let ft = enc.embed_text(&mut g, &[2, 3, 4, 5, 6, 7, 8, 9], &mask).unwrap();
        let fused = enc.fuse(&mut g, fa, fm, ft, &mask).unwrap();
        assert_eq!(g.shape(fused.tokens), &[3, 2 * 16 + 8, 32]);
        let (enc_out, probs) = enc.encode(&mut g, &fused);
        assert!(probs.is_empty());
        assert_eq!(g.value(enc_out), g.value(fused.tokens));
        let seg = deconcat(&mut g, enc_out, &fused.layout).unwrap();
        let pa = enc.proj_app.forward(&mut g, fa);
        let pa = g.reshape(pa, &[3, 16, 32]);
        assert_eq!(g.value(seg.appearance), g.value(pa));
        let pm = enc.proj_mot.forward(&mut g, fm);
        let pm = g.reshape(pm, &[3, 16, 32]);
        assert_eq!(g.value(seg.motion), g.value(pm));
        let pt = enc.proj_text.forward(&mut g, ft);
        assert_eq!(g.value(seg.text), g.value(pt));
        let bad = Layout {
            n_frames: 3,
            grid: 15,
            n_text: 8,
        };
        assert!(deconcat(&mut g, enc_out, &bad).is_err());
    }

    #[test]
    fn fuse_rejects_mismatched_streams() {
        let (store, enc, _) = setup(1);
        let mut g = Graph::new(&store);
        let fa = enc.extract_appearance(&mut g, &frames(3, 0)).unwrap();
        let fm = enc.extract_motion(&mut g, &frames(2, 0)).unwrap();
        let ft = enc.embed_text(&mut g, &[2; 8], &[true; 8]).unwrap();
        assert!(enc.fuse(&mut g, fa, fm, ft, &[true; 8]).is_err());
    }

    #[test]
    fn encoder_preserves_shape_in_both_scopes() {
        for scope in [AttentionScope::PerFrame, AttentionScope::CrossFrame] {
            let cfg = ModelConfig {
                encoder_scope: scope,
                ..ModelConfig::desk()
            };
            let mut store = ParamStore::new();
            let enc = MultimodalEncoder::new(&mut store, 1, &cfg, (4, 4), 10);
            let mut g = Graph::new(&store);
            let f = frames(3, 7);
            let fa = enc.extract_appearance(&mut g, &f).unwrap();
            let fm = enc.extract_motion(&mut g, &f).unwrap();
            let mask = [true, true, true, false, false, false, false, false];
            let ft = enc.embed_text(&mut g, &[2, 3, 4, 0, 0, 0, 0, 0], &mask).unwrap();
            let fused = enc.fuse(&mut g, fa, fm, ft, &mask).unwrap();
            let (out, probs) = enc.encode(&mut g, &fused);
            assert_eq!(g.shape(out), g.shape(fused.tokens));
            assert_eq!(probs.len(), 2);
            for p in probs {
                let v = g.value(p);
                let n = *v.shape().last().unwrap();
                for row in v.data().chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
