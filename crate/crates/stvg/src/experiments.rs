//! Training runs, evaluation, ablation tables and the fixed toy protocol.
//!
//! A run directory holds `config.toml`, `train_log.jsonl` (one [`StepLog`] per line),
//! `checkpoint/`, `eval.json` and `predictions.json`. A diverged run also holds `nan_batch/`,
//! a corpus directory with the offending batch plus `error.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stvg_core::config::{ActivationMode, AsaSwitches, MethodConfig, OptimConfig, RunConfig, TtsSwitches};
use stvg_core::metrics::EvalResult;
use stvg_core::model::{Model, Prediction};
use stvg_core::optim::Adam;
use stvg_core::train::{evaluate_model, Dataset, StepLog, Trainer};

use crate::checkpoint;
use crate::config_file;
use crate::corpus_io;
use crate::error::{Error, IoContext, Result};

pub const CONFIG: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL: &str = "eval.json";
pub const PREDICTIONS: &str = "predictions.json";
pub const CHECKPOINT: &str = "checkpoint";
pub const NAN_BATCH: &str = "nan_batch";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<usize>,
    /// Print a progress line every this many steps.
    pub progress_every: Option<usize>,
}

pub struct RunOutcome {
    pub model: Model,
    pub adam: Adam,
    pub logs: Vec<StepLog>,
    pub eval: EvalResult,
    pub predictions: Vec<Prediction>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).at(path)
}

fn dump_batch(dir: &Path, data: &Dataset, err: &stvg_core::Error) -> Result<()> {
    #[derive(Serialize)]
    struct Dump {
        error: String,
        step: Option<usize>,
        samples: Vec<usize>,
    }
    let out = dir.join(NAN_BATCH);
    let (step, idx) = match err {
        stvg_core::Error::Diverged { step, samples, .. } => (Some(*step), samples.clone()),
        _ => (None, Vec::new()),
    };
    let samples: Vec<_> = idx.iter().map(|&i| data.train[i].clone()).collect();
    corpus_io::save_corpus(&out, &samples)?;
    write_json(
        &out.join("error.json"),
        &Dump {
            error: err.to_string(),
            step,
            samples: idx,
        },
    )
}

/// Train from the current trainer state up to `optim.steps`, then evaluate.
fn drive(mut trainer: Trainer, data: &Dataset, dir: Option<&Path>, opts: &RunOptions) -> Result<RunOutcome> {
    let mut log = match dir {
        Some(d) => {
            let p = d.join(TRAIN_LOG);
            let f = fs::OpenOptions::new().create(true).append(true).open(&p).at(&p)?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let mut logs = Vec::new();
    let total = trainer.model.config.optim.steps;
    while trainer.step < total {
        let entry = match trainer.train_step() {
            Ok(e) => e,
            Err(e) => {
                if let Some(d) = dir {
                    dump_batch(d, data, &e)?;
                }
                return Err(e.into());
            }
        };
        if let Some((w, p)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").at(&*p)?;
        }
        if opts.progress_every.is_some_and(|k| trainer.step % k == 0) {
            eprintln!(
                "step {}/{} loss {:.4} (kl {:.4} l1 {:.4} iou {:.4} tts {:.4} asa {:.4})",
                trainer.step, total, entry.loss.total, entry.loss.kl, entry.loss.l1, entry.loss.iou, entry.loss.tts, entry.loss.asa
            );
        }
        logs.push(entry);
        if let (Some(d), Some(k)) = (dir, opts.checkpoint_every) {
            if trainer.step % k == 0 && trainer.step < total {
                checkpoint::save(&d.join(CHECKPOINT), &trainer.model, &trainer.adam, trainer.step)?;
            }
        }
    }
    if let Some((w, p)) = log.as_mut() {
        w.flush().at(&*p)?;
    }
    let (eval, predictions) = evaluate_model(&trainer.model, &data.eval)?;
    if let Some(d) = dir {
        checkpoint::save(&d.join(CHECKPOINT), &trainer.model, &trainer.adam, trainer.step)?;
        write_json(&d.join(EVAL), &eval)?;
        write_json(&d.join(PREDICTIONS), &predictions)?;
    }
    Ok(RunOutcome {
        model: trainer.model,
        adam: trainer.adam,
        logs,
        eval,
        predictions,
    })
}

/// Fresh training run; `dir`, when given, receives the run artefacts.
pub fn train(cfg: &RunConfig, dir: Option<&Path>, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(d) = dir {
        fs::create_dir_all(d).at(d)?;
        fs::write(d.join(CONFIG), config_file::to_toml(cfg)).at(d.join(CONFIG))?;
        let log = d.join(TRAIN_LOG);
        if log.exists() {
            fs::remove_file(&log).at(&log)?;
        }
    }
    let data = Dataset::generate(cfg)?;
    let trainer = Trainer::new(cfg, &data.train)?;
    drive(trainer, &data, dir, opts)
}

/// Continue a run from its last checkpoint. `steps` raises the step budget if given.
pub fn resume(dir: &Path, steps: Option<usize>, opts: &RunOptions) -> Result<RunOutcome> {
    let ck = checkpoint::load(&dir.join(CHECKPOINT))?;
    let mut model = ck.model;
    if let Some(s) = steps {
        model.config.optim.steps = s;
    }
    let data = Dataset::generate(&model.config)?;
    let mut trainer = Trainer::from_model(model, &data.train)?;
    trainer.adam = ck.adam;
    trainer.step = ck.manifest.step;
    truncate_log(&dir.join(TRAIN_LOG), trainer.step)?;
    drive(trainer, &data, Some(dir), opts)
}

/// Keep the first `steps` rows of a training log (rows past a checkpoint are replayed on resume).
fn truncate_log(path: &Path, steps: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).at(path)?;
    let kept: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).take(steps).collect();
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body).at(path)
}

pub fn read_log(dir: &Path) -> Result<Vec<StepLog>> {
    let p = dir.join(TRAIN_LOG);
    let text = fs::read_to_string(&p).at(&p)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Evaluate a saved run on its held-out split.
pub fn evaluate_run(dir: &Path) -> Result<(EvalResult, Vec<Prediction>)> {
    let ck = checkpoint::load(&dir.join(CHECKPOINT))?;
    let data = Dataset::generate(&ck.model.config)?;
    let (eval, preds) = evaluate_model(&ck.model, &data.eval)?;
    write_json(&dir.join(EVAL), &eval)?;
    write_json(&dir.join(PREDICTIONS), &preds)?;
    Ok((eval, preds))
}

/// The fixed toy protocol behind the directional checks: a 300-sample corpus split 240/60,
/// one step budget, and the run seed varying weight initialisation and sample order.
pub fn protocol(method: MethodConfig, seed: u64) -> RunConfig {
    RunConfig {
        train_size: 240,
        eval_size: 60,
        corpus_seed: 0,
        method,
        optim: OptimConfig {
            steps: PROTOCOL_STEPS,
            lr: 1e-3,
            backbone_lr: 1e-3,
            ..OptimConfig::default()
        },
        seed,
        ..RunConfig::default()
    }
}

pub const PROTOCOL_STEPS: usize = 1500;
pub const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    /// TTS and ASA on/off.
    TtsAsa,
    /// TTS text guidance, appearance and motion branches.
    TtsBranches,
    /// ASA subject guidance, appearance and motion branches.
    AsaBranches,
    /// None / instance / attribute activation.
    Activation,
    /// Score fusion weight sweep.
    Delta,
    /// Frame selection threshold sweep.
    Theta,
    /// Zero, target-aware and groundtruth-pooled queries.
    Oracle,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

impl Table {
    /// Names of the setting columns, in the order of [`cells`] labels.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Table::TtsAsa => &["TTS", "ASA"],
            Table::TtsBranches => &["TG", "AB", "MB"],
            Table::AsaBranches => &["SG", "AA", "MA"],
            Table::Activation => &["Activation"],
            Table::Delta => &["delta"],
            Table::Theta => &["theta"],
            Table::Oracle => &["Queries"],
        }
    }
}

/// Configurations of one ablation table, each with one label per setting column.
pub fn cells(table: Table, base: &RunConfig) -> Vec<(Vec<String>, RunConfig)> {
    let with = |m: MethodConfig| RunConfig {
        method: m,
        ..base.clone()
    };
    let ta = MethodConfig {
        query_mode: stvg_core::config::QueryMode::TargetAware,
        delta: base.method.delta,
        theta: base.method.theta,
        ..MethodConfig::default()
    };
    match table {
        Table::TtsAsa => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(t, a)| {
                let m = if !t && !a {
                    MethodConfig {
                        delta: ta.delta,
                        theta: ta.theta,
                        ..MethodConfig::baseline()
                    }
                } else {
                    MethodConfig {
                        tts: TtsSwitches { enabled: t, ..ta.tts },
                        asa: AsaSwitches { enabled: a, ..ta.asa },
                        ..ta.clone()
                    }
                };
                (vec![mark(t).into(), mark(a).into()], with(m))
            })
            .collect(),
        Table::TtsBranches => [
            (false, true, false),
            (false, false, true),
            (false, true, true),
            (true, true, false),
            (true, false, true),
            (true, true, true),
        ]
        .into_iter()
        .map(|(tg, ab, mb)| {
            let m = MethodConfig {
                tts: TtsSwitches {
                    enabled: true,
                    text_guided: tg,
                    appearance: ab,
                    motion: mb,
                },
                ..ta.clone()
            };
            (vec![mark(tg).into(), mark(ab).into(), mark(mb).into()], with(m))
        })
        .collect(),
        Table::AsaBranches => [
            (false, true, true),
            (true, true, false),
            (true, false, true),
            (true, true, true),
        ]
        .into_iter()
        .map(|(sg, aa, ma)| {
            let m = MethodConfig {
                asa: AsaSwitches {
                    enabled: true,
                    subject_guided: sg,
                    appearance: aa,
                    motion: ma,
                },
                ..ta.clone()
            };
            (vec![mark(sg).into(), mark(aa).into(), mark(ma).into()], with(m))
        })
        .collect(),
        Table::Activation => [
            ("None", ActivationMode::None),
            ("Instance-act.", ActivationMode::Instance),
            ("Attribute-act.", ActivationMode::Attribute),
        ]
        .into_iter()
        .map(|(l, a)| {
            (
                vec![l.to_string()],
                with(MethodConfig {
                    activation: a,
                    ..ta.clone()
                }),
            )
        })
        .collect(),
        Table::Delta => [0.4, 0.5, 0.6]
            .into_iter()
            .map(|d| (vec![d.to_string()], with(MethodConfig { delta: d, ..ta.clone() })))
            .collect(),
        Table::Theta => [0.6, 0.7, 0.8]
            .into_iter()
            .map(|t| (vec![t.to_string()], with(MethodConfig { theta: t, ..ta.clone() })))
            .collect(),
        Table::Oracle => vec![
            (vec!["zero".into()], with(MethodConfig::baseline())),
            (vec!["target-aware".into()], with(ta.clone())),
            (vec!["groundtruth-pooled".into()], with(MethodConfig::oracle())),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// One entry per [`Table::columns`] name.
    pub label: Vec<String>,
    pub seeds: Vec<u64>,
    /// Per-seed `[m_tIoU, m_vIoU, vIoU@0.3, vIoU@0.5]`.
    pub runs: Vec<[f64; 4]>,
    /// Mean over successful seeds.
    pub mean: Option<[f64; 4]>,
    pub errors: Vec<String>,
}

/// One train + evaluate run per cell and seed; failures are recorded and the sweep continues.
pub fn ablate(
    table: Table,
    base: &RunConfig,
    seeds: &[u64],
    out: Option<&Path>,
    opts: &RunOptions,
) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (i, (label, cfg)) in cells(table, base).into_iter().enumerate() {
        let mut row = Row {
            label: label.clone(),
            seeds: seeds.to_vec(),
            runs: Vec::new(),
            mean: None,
            errors: Vec::new(),
        };
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let dir: Option<PathBuf> = out.map(|o| o.join(format!("cell{}_seed{}", i, seed)));
            match train(&cfg, dir.as_deref(), opts) {
                Ok(r) => row.runs.push(r.eval.headline()),
                Err(e) => row.errors.push(format!("seed {}: {}", seed, e)),
            }
        }
        if !row.runs.is_empty() {
            let n = row.runs.len() as f64;
            let mut m = [0.0; 4];
            for r in &row.runs {
                for k in 0..4 {
                    m[k] += r[k] / n;
                }
            }
            row.mean = Some(m);
        }
        if let Some(o) = out {
            fs::create_dir_all(o).at(o)?;
            write_json(&o.join("rows.json"), &rows.iter().chain([&row]).collect::<Vec<_>>())?;
        }
        rows.push(row);
    }
    if let Some(o) = out {
        let p = o.join("table.md");
        fs::write(&p, markdown(table, &rows)).at(&p)?;
    }
    Ok(rows)
}

pub fn markdown(table: Table, rows: &[Row]) -> String {
    let cols = table.columns();
    let mut s = String::new();
    for c in cols {
        s.push_str(&format!("| {} ", c));
    }
    s.push_str("| m_tIoU | m_vIoU | vIoU@0.3 | vIoU@0.5 |\n");
    s.push_str(&"|---".repeat(cols.len() + 4));
    s.push_str("|\n");
    for r in rows {
        for l in &r.label {
            s.push_str(&format!("| {} ", l));
        }
        match r.mean {
            Some(m) => s.push_str(&format!("| {:.1} | {:.1} | {:.1} | {:.1} |\n", m[0], m[1], m[2], m[3])),
            None => s.push_str("| failed | failed | failed | failed |\n"),
        }
    }
    for r in rows {
        for e in &r.errors {
            s.push_str(&format!("\n{}: {}\n", r.label.join(" / "), e));
        }
    }
    s
}
