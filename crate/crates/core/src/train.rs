//! Training loop and held-out evaluation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::corpus::{derived_seed, generate_corpus, VideoSample};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::{evaluate, EvalResult, GroundTruth};
use crate::model::{Model, Prediction, Prepared, Vocabularies};
use crate::optim::Adam;

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub samples: Vec<usize>,
}

/// Sample indices of batch `step`: epoch-wise permutations seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for j in 0..batch {
        let pos = step * batch + j;
        let epoch = pos / n;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed ^ 0xBA7C4, epoch as u64));
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Training and evaluation corpora, generated from the run configuration.
pub struct Dataset {
    pub train: Vec<VideoSample>,
    pub eval: Vec<VideoSample>,
}

impl Dataset {
    /// Train and held-out splits use disjoint sample seeds.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            train: generate_corpus(&cfg.scene, cfg.train_size, cfg.corpus_seed)?,
            eval: generate_corpus(&cfg.scene, cfg.eval_size.max(1), cfg.corpus_seed ^ 0xE7A1_0000)?,
        })
    }
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
    pub train: Vec<Prepared>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, train: &[VideoSample]) -> Result<Self> {
        let vocab = Vocabularies::build(train, cfg)?;
        let model = Model::new(cfg, vocab)?;
        Self::from_model(model, train)
    }

    pub fn from_model(model: Model, train: &[VideoSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let train = train
            .iter()
            .map(|s| model.vocab.prepare(s, model.grid))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(&model.store);
        Ok(Self {
            model,
            adam,
            step: 0,
            train,
        })
    }

    /// Batch-mean gradients, clipping and one Adam update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let cfg = &self.model.config;
        let idx = batch_indices(cfg.seed, self.step, self.train.len(), cfg.optim.batch_size);
        let scale = 1.0 / idx.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut grads = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut g = Graph::new(&self.model.store);
            let (total, b, _) = self.model.loss(&mut g, &self.train[i]).map_err(|e| Error::Diverged {
                step: self.step,
                samples: idx.clone(),
                detail: format!("sample {}: {}", i, e),
            })?;
            let gr = g.backward(total);
            grads.push(gr);
            mean.tts += b.tts * scale;
            mean.asa += b.asa * scale;
            mean.kl += b.kl * scale;
            mean.l1 += b.l1 * scale;
            mean.iou += b.iou * scale;
            mean.total += b.total * scale;
        }
        self.model.store.zero_grad();
        for gr in &grads {
            self.model.store.accumulate(gr.params(), scale);
        }
        let norm = self.adam.step(&mut self.model.store, &self.model.config.optim);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                samples: idx,
                detail: "non-finite gradient".into(),
            });
        }
        let log = StepLog {
            step: self.step,
            loss: mean,
            grad_norm: norm,
            samples: idx,
        };
        self.step += 1;
        Ok(log)
    }

    /// Run until `optim.steps` steps are complete.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.model.config.optim.steps {
            let log = self.train_step()?;
            on_step(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Predictions and metrics over a held-out split.
pub fn evaluate_model(model: &Model, samples: &[VideoSample]) -> Result<(EvalResult, Vec<Prediction>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(samples.len());
    for s in samples {
        let x = model.vocab.prepare(s, model.grid)?;
        preds.push(model.predict(&x)?);
        gts.push(x.groundtruth());
    }
    let tubes: Vec<_> = preds.iter().map(|p| p.tube.clone()).collect();
    Ok((evaluate(&tubes, &gts)?, preds))
}
