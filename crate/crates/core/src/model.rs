//! End-to-end model: encoder, query generation, decoders and heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::asa::{self, ActivationOutput, SpatialActivator};
use crate::autograd::{Graph, Var};
use crate::config::{ActivationMode, ModelConfig, QueryMode, RunConfig};
use crate::corpus::{derived_seed, BoxCxCyWh, VideoSample};
use crate::decoder::{extract_tube, BoxHead, QueryDecoder, SpanHead, TubePrediction};
use crate::encoder::{deconcat, MultimodalEncoder};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossTerms};
use crate::metrics::GroundTruth;
use crate::params::{Init, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text::{
    attribute_labels, build_vocabulary, tokenize_with, Lexicon, VocabKind, Vocabulary, WordIndex,
};
use crate::tts::{self, RelevanceOutput, Scores, TemporalSampler};

/// Everything derived from the training texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub lexicon: Lexicon,
    pub words: WordIndex,
    pub appearance: Vocabulary,
    pub motion: Vocabulary,
    pub n_tokens: usize,
}

impl Vocabularies {
    pub fn build(samples: &[VideoSample], cfg: &RunConfig) -> Result<Self> {
        let lexicon = Lexicon::for_scene(&cfg.scene);
        let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        Ok(Self {
            words: WordIndex::build(&texts),
            appearance: build_vocabulary(&texts, VocabKind::Appearance, cfg.vocab_min_count, &lexicon)?,
            motion: build_vocabulary(&texts, VocabKind::Motion, cfg.vocab_min_count, &lexicon)?,
            lexicon,
            n_tokens: cfg.model.n_tokens,
        })
    }

    pub fn prepare(&self, sample: &VideoSample, grid: (usize, usize)) -> Result<Prepared> {
        let seq = tokenize_with(&sample.text, self.n_tokens, &self.lexicon)?;
        let labels = attribute_labels(&seq, &self.appearance, &self.motion);
        let n = sample.frame_count();
        let (s, e) = sample.gt_span;
        if s > e || e >= n || sample.gt_boxes.len() != e - s + 1 {
            return Err(Error::MissingGroundtruth(format!(
                "span {:?} with {} boxes over {} frames",
                sample.gt_span,
                sample.gt_boxes.len(),
                n
            )));
        }
        let masks = (0..n)
            .map(|f| match sample.gt_box(f) {
                Some(b) => asa::grid_mask(b, grid.0, grid.1)
                    .into_iter()
                    .map(|m| if m { 1.0 } else { 0.0 })
                    .collect(),
                None => vec![0.0; grid.0 * grid.1],
            })
            .collect();
        Ok(Prepared {
            frames: sample.frames.clone(),
            text: sample.text.clone(),
            token_ids: self.words.ids(&seq),
            text_mask: seq.pad_mask.clone(),
            subject_span: seq.subject_span,
            appearance_label: labels.appearance,
            motion_label: labels.motion,
            gt_span: sample.gt_span,
            gt_boxes: sample.gt_boxes.clone(),
            grid_masks: masks,
        })
    }
}

/// A sample in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub frames: Tensor,
    pub text: String,
    pub token_ids: Vec<usize>,
    pub text_mask: Vec<bool>,
    pub subject_span: (usize, usize),
    pub appearance_label: Vec<f64>,
    pub motion_label: Vec<f64>,
    pub gt_span: (usize, usize),
    pub gt_boxes: Vec<BoxCxCyWh>,
    /// Per frame, rasterised groundtruth box on the feature grid (zeros off-span).
    pub grid_masks: Vec<Vec<f64>>,
}

impl Prepared {
    pub fn groundtruth(&self) -> GroundTruth {
        GroundTruth {
            span: self.gt_span,
            boxes: self.gt_boxes.clone(),
        }
    }
}

/// All intermediate tape values of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[N_v, 4]`
    pub boxes: Var,
    pub h_s: Var,
    pub h_e: Var,
    pub scores: Option<Scores>,
    pub relevance: Option<RelevanceOutput>,
    pub activation: Option<ActivationOutput>,
    pub q_s: Var,
    pub q_t: Var,
    /// Every softmax-normalised attention map produced on the way.
    pub attention: Vec<Var>,
}

const SEED_ENCODER: u64 = 1;
const SEED_TTS: u64 = 2;
const SEED_ASA: u64 = 3;
const SEED_SPATIAL: u64 = 4;
const SEED_TEMPORAL: u64 = 5;
const SEED_HEADS: u64 = 6;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabularies,
    pub store: ParamStore,
    pub encoder: MultimodalEncoder,
    pub sampler: Option<TemporalSampler>,
    pub activator: Option<SpatialActivator>,
    pub spatial: QueryDecoder,
    pub temporal: QueryDecoder,
    pub box_head: BoxHead,
    pub span_head: SpanHead,
    pub grid: (usize, usize),
    pub n_frames: usize,
}

impl Model {
    /// Fresh weights. Shared modules draw from per-module seeds, so they are identical across methods.
    pub fn new(config: &RunConfig, vocab: Vocabularies) -> Result<Self> {
        config.validate()?;
        let m: &ModelConfig = &config.model;
        if vocab.n_tokens != m.n_tokens {
            return Err(Error::Config(format!(
                "vocabularies built for {} tokens, model expects {}",
                vocab.n_tokens, m.n_tokens
            )));
        }
        let grid = config.grid();
        let n = config.scene.frame_count;
        let seed = |k| derived_seed(config.seed, k);
        let mut store = ParamStore::new();
        let encoder = MultimodalEncoder::new(&mut store, seed(SEED_ENCODER), m, grid, vocab.words.len());
        let method = &config.method;
        let sampler = method
            .uses_tts()
            .then(|| TemporalSampler::new(&mut store, seed(SEED_TTS), m, method));
        let activator = method.uses_asa().then(|| {
            SpatialActivator::new(
                &mut store,
                seed(SEED_ASA),
                m,
                method,
                (vocab.appearance.len(), vocab.motion.len()),
            )
        });
        let spatial = QueryDecoder::new(&mut store, seed(SEED_SPATIAL), "spatial", m, n);
        let temporal = QueryDecoder::new(&mut store, seed(SEED_TEMPORAL), "temporal", m, n);
        let mut init = Init::new(seed(SEED_HEADS));
        init.group = ParamGroup::Head;
        let box_head = BoxHead::new(&mut store, &mut init, m.d_model);
        let span_head = SpanHead::new(&mut store, &mut init, m.d_model);
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            encoder,
            sampler,
            activator,
            spatial,
            temporal,
            box_head,
            span_head,
            grid,
            n_frames: n,
        })
    }

    pub fn check(&self, x: &Prepared) -> Result<()> {
        let s = x.frames.shape();
        let c = &self.config.scene;
        if s != [self.n_frames, c.frame_height, c.frame_width, 3] {
            return Err(Error::Shape(format!(
                "frames {:?}, model expects [{}, {}, {}, 3]",
                s, self.n_frames, c.frame_height, c.frame_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: &Prepared) -> Result<Forward> {
        self.check(x)?;
        let method = &self.config.method;
        let mut attention = Vec::new();
        let fa = self.encoder.extract_appearance(g, &x.frames)?;
        let fm = self.encoder.extract_motion(g, &x.frames)?;
        let ft = self.encoder.embed_text(g, &x.token_ids, &x.text_mask)?;
        let fused = self.encoder.fuse(g, fa, fm, ft, &x.text_mask)?;
        let (encoded, probs) = self.encoder.encode(g, &fused);
        attention.extend(probs);
        let seg = deconcat(g, encoded, &fused.layout)?;
        let n = self.n_frames;
        let d = self.config.model.d_model;

        let mut scores = None;
        let mut relevance = None;
        let mut activation = None;
        let (q_s, q_t) = match method.query_mode {
            QueryMode::Zero => {
                let z = g.constant(Tensor::zeros(&[n, d]));
                (z, z)
            }
            QueryMode::Oracle => (
                asa::oracle_queries(g, seg.appearance, x.gt_span, &x.gt_boxes, self.grid)?,
                asa::oracle_queries(g, seg.motion, x.gt_span, &x.gt_boxes, self.grid)?,
            ),
            QueryMode::TargetAware => {
                let (r_a, r_m) = match &self.sampler {
                    Some(sampler) => {
                        let pooled = tts::pool_features(g, &seg, &x.text_mask)?;
                        let sc = sampler.relevance_scores(g, &pooled, method.tts.text_guided);
                        attention.extend(sc.probs.iter().copied());
                        let s_a = sc.s_a.map(|v| g.value(v).data().to_vec());
                        let s_m = sc.s_m.map(|v| g.value(v).data().to_vec());
                        let s = match (&s_a, &s_m) {
                            (Some(a), Some(m)) => tts::fuse_scores(a, m, method.delta)?,
                            (Some(a), None) => a.clone(),
                            (None, Some(m)) => m.clone(),
                            (None, None) => return Err(Error::Config("TTS has no active branch".into())),
                        };
                        let out = tts::sample_frames(
                            g,
                            seg.appearance,
                            seg.motion,
                            s_a.unwrap_or_default(),
                            s_m.unwrap_or_default(),
                            s,
                            method.theta,
                        )?;
                        let r = (out.r_a, out.r_m);
                        scores = Some(sc);
                        relevance = Some(out);
                        r
                    }
                    None => (seg.appearance, seg.motion),
                };
                match &self.activator {
                    Some(act) => {
                        let subject = asa::subject_feature(g, seg.text, x.subject_span, &x.text_mask)?;
                        let out = act.forward(g, subject, r_a, r_m, n)?;
                        attention.extend(out.probs.iter().copied());
                        attention.push(out.m_a);
                        attention.push(out.m_m);
                        let q = (out.q_s, out.q_t);
                        activation = Some(out);
                        q
                    }
                    None => {
                        let hw = g.shape(r_a)[1];
                        let k = g.shape(r_a)[0];
                        let uniform = g.constant(Tensor::full(&[k, hw], 1.0 / hw as f64));
                        let a_a = asa::activate(g, uniform, r_a)?;
                        let a_m = asa::activate(g, uniform, r_m)?;
                        (asa::make_queries(g, a_a, n)?, asa::make_queries(g, a_m, n)?)
                    }
                }
            }
        };

        let sd = self.spatial.forward(g, q_s, seg.appearance, seg.text, &x.text_mask)?;
        let td = self.temporal.forward(g, q_t, seg.motion, seg.text, &x.text_mask)?;
        attention.extend(sd.self_probs.iter().chain(&sd.cross_probs).copied());
        attention.extend(td.self_probs.iter().chain(&td.cross_probs).copied());
        let boxes = self.box_head.forward(g, sd.queries);
        let (h_s, h_e) = self.span_head.forward(g, td.queries);
        attention.push(h_s);
        attention.push(h_e);
        Ok(Forward {
            boxes,
            h_s,
            h_e,
            scores,
            relevance,
            activation,
            q_s,
            q_t,
            attention,
        })
    }

    /// The five loss terms of one sample; absent modules contribute exact zeros.
    pub fn loss_terms(&self, g: &mut Graph, f: &Forward, x: &Prepared) -> Result<LossTerms> {
        let lc = &self.config.loss;
        let tts = match &f.scores {
            Some(s) => {
                let streams: Vec<Var> = s.s_a.iter().chain(s.s_m.iter()).copied().collect();
                loss::tts_loss(g, &streams, x.gt_span, lc.eps)?
            }
            None => g.scalar(0.0),
        };
        let asa = match &f.activation {
            Some(a) => match self.config.method.activation {
                ActivationMode::Instance => {
                    let idx: Vec<usize> = match &f.relevance {
                        Some(r) => r.indices.clone(),
                        None => (0..self.n_frames).collect(),
                    };
                    let masks: Vec<f64> = idx.iter().flat_map(|&i| x.grid_masks[i].iter().copied()).collect();
                    let mut total = g.scalar(0.0);
                    for logits in a.instance_a.iter().chain(a.instance_m.iter()) {
                        let l = loss::instance_loss(g, *logits, &masks, lc.eps)?;
                        total = g.add(total, l);
                    }
                    total
                }
                _ => {
                    let mut branches: Vec<(Var, &[f64])> = Vec::new();
                    if let Some(c) = a.c_a {
                        branches.push((c, &x.appearance_label));
                    }
                    if let Some(c) = a.c_m {
                        branches.push((c, &x.motion_label));
                    }
                    loss::asa_loss(g, &branches, lc.eps)?
                }
            },
            None => g.scalar(0.0),
        };
        let kl = loss::temporal_loss(g, f.h_s, f.h_e, x.gt_span, lc.temporal_sigma)?;
        let sp = loss::spatial_loss(g, f.boxes, &x.gt_boxes, x.gt_span, lc.smooth_l1_beta, lc.iou)?;
        Ok(LossTerms {
            tts,
            asa,
            kl,
            l1: sp.l1,
            iou: sp.iou,
        })
    }

    /// Forward plus weighted total loss.
    pub fn loss(&self, g: &mut Graph, x: &Prepared) -> Result<(Var, LossBreakdown, Forward)> {
        let f = self.forward(g, x)?;
        let terms = self.loss_terms(g, &f, x)?;
        let (total, b) = loss::total_loss(g, &terms, &self.config.loss.weights);
        if !b.total.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((total, b, f))
    }

    pub fn predict(&self, x: &Prepared) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, x)?;
        let boxes: Vec<BoxCxCyWh> = g
            .value(f.boxes)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let tube = extract_tube(&boxes, g.value(f.h_s).data(), g.value(f.h_e).data())?;
        let value = |v: Option<Var>, g: &Graph| v.map(|v| g.value(v).data().to_vec());
        Ok(Prediction {
            tube,
            relevance: f.relevance.as_ref().map(|r| RelevanceRecord {
                s_a: r.s_a.clone(),
                s_m: r.s_m.clone(),
                s: r.s.clone(),
                indices: r.indices.clone(),
            }),
            c_a: f.activation.as_ref().and_then(|a| value(a.c_a, &g)),
            c_m: f.activation.as_ref().and_then(|a| value(a.c_m, &g)),
            m_a: f.activation.as_ref().map(|a| g.value(a.m_a).clone()),
            m_m: f.activation.as_ref().map(|a| g.value(a.m_m).clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub s_a: Vec<f64>,
    pub s_m: Vec<f64>,
    pub s: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Inference output of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tube: TubePrediction,
    pub relevance: Option<RelevanceRecord>,
    pub c_a: Option<Vec<f64>>,
    pub c_m: Option<Vec<f64>>,
    /// `[n_sel, H*W]` activation maps.
    pub m_a: Option<Tensor>,
    pub m_m: Option<Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MethodConfig;
    use crate::corpus::generate_corpus;

    fn setup(method: MethodConfig) -> (Model, Vec<Prepared>) {
        let cfg = RunConfig {
            method,
            ..RunConfig::default()
        };
        let samples = generate_corpus(&cfg.scene, 3, 11).unwrap();
        let vocab = Vocabularies::build(&samples, &cfg).unwrap();
        let model = Model::new(&cfg, vocab).unwrap();
        let prepared = samples
            .iter()
            .map(|s| model.vocab.prepare(s, model.grid).unwrap())
            .collect();
        (model, prepared)
    }

    #[test]
    fn every_mode_runs_end_to_end() {
        let mut instance = MethodConfig {
            activation: ActivationMode::Instance,
            ..MethodConfig::default()
        };
        instance.tts.text_guided = false;
        for method in [MethodConfig::default(), MethodConfig::baseline(), MethodConfig::oracle(), instance] {
            let (model, data) = setup(method.clone());
            for x in &data {
                let mut g = Graph::new(&model.store);
                let (_, b, f) = model.loss(&mut g, x).unwrap();
                assert!(b.total.is_finite() && b.total > 0.0);
                for p in &f.attention {
                    let v = g.value(*p);
                    let k = *v.shape().last().unwrap();
                    for row in v.data().chunks(k) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                }
                if method.query_mode == QueryMode::Zero {
                    assert_eq!(b.tts, 0.0);
                    assert_eq!(b.asa, 0.0);
                }
                let p = model.predict(x).unwrap();
                assert!(p.tube.span.0 <= p.tube.span.1);
            }
        }
    }

    #[test]
    fn shared_weights_match_across_methods() {
        let (a, _) = setup(MethodConfig::default());
        let (b, _) = setup(MethodConfig::baseline());
        assert!(b.store.len() < a.store.len());
        for (_, p) in b.store.iter() {
            let id = a.store.find(&p.name).unwrap();
            assert_eq!(a.store.value(id), &p.value, "{}", p.name);
        }
        assert!(b.store.iter().all(|(_, p)| !p.name.starts_with("tts.") && !p.name.starts_with("asa.")));
    }

    #[test]
    fn wrong_frame_shape_is_rejected() {
        let (model, data) = setup(MethodConfig::default());
        let mut x = data[0].clone();
        x.frames = Tensor::zeros(&[4, 32, 32, 3]);
        assert!(model.predict(&x).is_err());
    }
}
