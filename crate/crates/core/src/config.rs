//! Run configuration shared by the model, the trainer and the harness.

use serde::{Deserialize, Serialize};

use crate::corpus::SceneConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Tokens attend only within their own frame.
    PerFrame,
    /// Tokens attend across all frames.
    CrossFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeHead {
    /// Independent per-attribute logistic scores (multi-label).
    Sigmoid,
    /// Softmax over the vocabulary.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Encoder blocks (L).
    pub encoder_layers: usize,
    /// Blocks per decoder (K).
    pub decoder_layers: usize,
    pub c_app: usize,
    pub c_mot: usize,
    pub c_text: usize,
    /// Width of the first stub convolution.
    pub stem_channels: usize,
    /// Kernel/stride of the two stub convolutions; the grid stride is their product.
    pub patch1: usize,
    pub patch2: usize,
    /// Text sequence length (N_t).
    pub n_tokens: usize,
    pub encoder_scope: AttentionScope,
    pub decoder_scope: AttentionScope,
    /// Learned per-frame positional term added to decoder queries at every block.
    pub query_pos: bool,
    pub attribute_head: AttributeHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale sizes used by the experiment protocol.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            c_app: 32,
            c_mot: 32,
            c_text: 32,
            stem_channels: 16,
            patch1: 4,
            patch2: 2,
            n_tokens: 8,
            encoder_scope: AttentionScope::PerFrame,
            decoder_scope: AttentionScope::PerFrame,
            query_pos: true,
            attribute_head: AttributeHead::Sigmoid,
        }
    }

    /// Published full-scale sizes (D = 256, 8 heads, L = K = 6, N_t = 30).
    pub fn full_scale() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            c_app: 2048,
            c_mot: 768,
            c_text: 768,
            n_tokens: 30,
            ..Self::desk()
        }
    }

    pub fn stride(&self) -> usize {
        self.patch1 * self.patch2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model must be a positive multiple of heads".into()));
        }
        if self.c_text % self.heads != 0 {
            return Err(Error::Config("c_text must be a multiple of heads".into()));
        }
        if self.patch1 == 0 || self.patch2 == 0 || self.n_tokens == 0 {
            return Err(Error::Config("patch sizes and n_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Zero-initialised object queries (baseline).
    Zero,
    /// Queries generated by temporal sampling + attribute activation.
    TargetAware,
    /// Queries pooled from groundtruth boxes (diagnostic upper bound).
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    None,
    Instance,
    Attribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsSwitches {
    pub enabled: bool,
    pub text_guided: bool,
    pub appearance: bool,
    pub motion: bool,
}

impl Default for TtsSwitches {
    fn default() -> Self {
        Self {
            enabled: true,
            text_guided: true,
            appearance: true,
            motion: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsaSwitches {
    pub enabled: bool,
    pub subject_guided: bool,
    pub appearance: bool,
    pub motion: bool,
}

impl Default for AsaSwitches {
    fn default() -> Self {
        Self {
            enabled: true,
            subject_guided: true,
            appearance: true,
            motion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub query_mode: QueryMode,
    pub activation: ActivationMode,
    pub tts: TtsSwitches,
    pub asa: AsaSwitches,
    /// Appearance weight when fusing relevance scores.
    pub delta: f64,
    /// Frame selection threshold on the fused relevance score.
    pub theta: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            query_mode: QueryMode::TargetAware,
            activation: ActivationMode::Attribute,
            tts: TtsSwitches::default(),
            asa: AsaSwitches::default(),
            delta: 0.5,
            theta: 0.7,
        }
    }
}

impl MethodConfig {
    /// Zero queries with both query-generation modules removed.
    pub fn baseline() -> Self {
        Self {
            query_mode: QueryMode::Zero,
            activation: ActivationMode::None,
            tts: TtsSwitches {
                enabled: false,
                ..TtsSwitches::default()
            },
            asa: AsaSwitches {
                enabled: false,
                ..AsaSwitches::default()
            },
            ..Self::default()
        }
    }

    pub fn oracle() -> Self {
        Self {
            query_mode: QueryMode::Oracle,
            ..Self::baseline()
        }
    }

    pub fn uses_tts(&self) -> bool {
        self.query_mode == QueryMode::TargetAware
            && self.tts.enabled
            && (self.tts.appearance || self.tts.motion)
    }

    pub fn uses_asa(&self) -> bool {
        self.query_mode == QueryMode::TargetAware
            && self.asa.enabled
            && self.activation != ActivationMode::None
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Range(alloc::format!("delta {} outside [0, 1]", self.delta)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Range(alloc::format!("theta {} outside (0, 1)", self.theta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub tts: f64,
    pub asa: f64,
    pub kl: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tts: 1.0,
            asa: 1.0,
            kl: 10.0,
            l1: 5.0,
            iou: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouLoss {
    Generalized,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Probability clipping for the BCE terms.
    pub eps: f64,
    pub smooth_l1_beta: f64,
    pub iou: IouLoss,
    /// Gaussian smoothing of the start/end targets; `None` means one-hot.
    pub temporal_sigma: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            eps: 1e-6,
            smooth_l1_beta: 0.1,
            iou: IouLoss::Generalized,
            temporal_sigma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate of the feature-extraction stubs.
    pub backbone_lr: f64,
    /// Keep the motion stub at its initial weights.
    pub freeze_motion: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            backbone_lr: 3e-4,
            freeze_motion: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            steps: 200,
            batch_size: 4,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train_size: usize,
    pub eval_size: usize,
    pub corpus_seed: u64,
    pub vocab_min_count: usize,
    pub model: ModelConfig,
    pub method: MethodConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Seeds weight initialisation and sample order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_size: 200,
            eval_size: 100,
            corpus_seed: 0,
            vocab_min_count: 1,
            model: ModelConfig::desk(),
            method: MethodConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.method.validate()?;
        let s = self.model.stride();
        if self.scene.frame_height % s != 0 || self.scene.frame_width % s != 0 {
            return Err(Error::Config(alloc::format!(
                "frame size {}x{} not divisible by stub stride {}",
                self.scene.frame_height,
                self.scene.frame_width,
                s
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be >= 1".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let w = &self.loss.weights;
        if [w.tts, w.asa, w.kl, w.l1, w.iou].iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.model.stride();
        (self.scene.frame_height / s, self.scene.frame_width / s)
    }
}
