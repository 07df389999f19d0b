use std::path::Path;
use std::process::Command;

use stvg::config_file;
use stvg::experiments::{self, ablate, markdown, read_log, resume, train, RunOptions, Table};
use stvg::report::report;
use stvg_core::config::{MethodConfig, RunConfig};

fn small(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "scene.frame_count=4",
        "scene.frame_height=8",
        "scene.frame_width=8",
        "model.d_model=8",
        "model.heads=2",
        "model.encoder_layers=1",
        "model.decoder_layers=1",
        "model.c_app=8",
        "model.c_mot=8",
        "model.c_text=8",
        "model.stem_channels=4",
        "model.patch1=2",
        "model.patch2=2",
        "train_size=8",
        "eval_size=3",
        "optim.batch_size=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    config_file::build(None, &o).unwrap()
}

#[test]
fn two_hundred_steps_log_two_hundred_rows() {
    let cfg = config_file::build(None, &["train_size=200".into(), "eval_size=4".into(), "optim.steps=200".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, Some(dir.path()), &RunOptions::default()).unwrap();
    assert_eq!(out.logs.len(), 200);
    let rows = read_log(dir.path()).unwrap();
    assert_eq!(rows.len(), 200);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.loss.total.is_finite());
    }
    for f in [experiments::CONFIG, experiments::EVAL, experiments::PREDICTIONS] {
        assert!(dir.path().join(f).exists(), "{}", f);
    }
    assert!(dir.path().join(experiments::CHECKPOINT).join("manifest.json").exists());
}

#[test]
fn resume_reproduces_the_next_steps_exactly() {
    let full = small(&["optim.steps=6"]);
    let reference = train(&full, None, &RunOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = RunConfig {
        optim: stvg_core::config::OptimConfig { steps: 3, ..full.optim.clone() },
        ..full.clone()
    };
    train(&half, Some(dir.path()), &RunOptions::default()).unwrap();
    let resumed = resume(dir.path(), Some(6), &RunOptions::default()).unwrap();
    assert_eq!(resumed.logs.len(), 3);
    for (a, b) in resumed.logs.iter().zip(&reference.logs[3..]) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
    }
    assert_eq!(read_log(dir.path()).unwrap(), reference.logs);
    assert_eq!(resumed.eval, reference.eval);
}

#[test]
fn resume_from_a_mid_run_checkpoint_drops_replayed_rows() {
    let cfg = small(&["optim.steps=4"]);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_every: Some(2),
        progress_every: None,
    };
    let reference = train(&cfg, Some(dir.path()), &opts).unwrap();
    // Roll the checkpoint back to step 2 by re-running a 2-step run into a fresh directory.
    let dir2 = tempfile::tempdir().unwrap();
    let two = RunConfig {
        optim: stvg_core::config::OptimConfig { steps: 2, ..cfg.optim.clone() },
        ..cfg.clone()
    };
    train(&two, Some(dir2.path()), &opts).unwrap();
    // Pretend the run crashed after writing rows 2 and 3.
    std::fs::copy(dir.path().join(experiments::TRAIN_LOG), dir2.path().join(experiments::TRAIN_LOG)).unwrap();
    resume(dir2.path(), Some(4), &opts).unwrap();
    assert_eq!(read_log(dir2.path()).unwrap(), reference.logs);
}

#[test]
fn tts_asa_table_has_four_rows_and_metric_columns() {
    let base = small(&["optim.steps=2"]);
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(Table::TtsAsa, &base, &[0], Some(dir.path()), &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.errors.is_empty() && r.mean.is_some()));
    let md = markdown(Table::TtsAsa, &rows);
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "| TTS | ASA | m_tIoU | m_vIoU | vIoU@0.3 | vIoU@0.5 |");
    let marks: Vec<&str> = lines[2..].iter().map(|l| &l[..10]).collect();
    assert_eq!(marks, ["| - | - | ", "| x | - | ", "| - | x | ", "| x | x | "]);
    for l in &lines[2..] {
        assert_eq!(l.matches('|').count(), 7, "{}", l);
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("table.md")).unwrap(), md);
    assert!(dir.path().join("rows.json").exists());
}

#[test]
fn sweeps_use_the_default_grids() {
    let base = small(&[]);
    let labels = |t| experiments::cells(t, &base).into_iter().map(|(l, c)| (l, c.method)).collect::<Vec<_>>();
    let d: Vec<f64> = labels(Table::Delta).iter().map(|(_, m)| m.delta).collect();
    assert_eq!(d, [0.4, 0.5, 0.6]);
    let t: Vec<f64> = labels(Table::Theta).iter().map(|(_, m)| m.theta).collect();
    assert_eq!(t, [0.6, 0.7, 0.8]);
    assert_eq!(labels(Table::Activation).len(), 3);
    assert_eq!(labels(Table::Oracle).len(), 3);
}

#[test]
fn failing_cells_are_recorded_and_the_sweep_continues() {
    let base = small(&["optim.steps=1", "loss.weights.kl=1e308"]);
    let dir = tempfile::tempdir().unwrap();
    let rows = ablate(Table::Oracle, &base, &[0, 1], Some(dir.path()), &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.mean.is_none());
        assert_eq!(r.errors.len(), 2);
    }
    assert!(markdown(Table::Oracle, &rows).contains("| zero | failed |"));
}

#[test]
fn non_finite_loss_dumps_the_batch() {
    let cfg = small(&["optim.steps=3", "loss.weights.kl=1e308"]);
    let dir = tempfile::tempdir().unwrap();
    assert!(train(&cfg, Some(dir.path()), &RunOptions::default()).is_err());
    let dump = dir.path().join(experiments::NAN_BATCH);
    let batch = stvg::corpus_io::load_corpus(&dump).unwrap();
    assert_eq!(batch.len(), cfg.optim.batch_size);
    let err: serde_json::Value = serde_json::from_slice(&std::fs::read(dump.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["step"], 0);
    assert_eq!(err["samples"].as_array().unwrap().len(), 2);
    assert!(err["error"].as_str().unwrap().contains("loss"));
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn report_renders_bars_curves_and_overlays() {
    let root = tempfile::tempdir().unwrap();
    let zero = root.path().join("zero");
    let ta = root.path().join("ta");
    let mut cfg = small(&["optim.steps=2"]);
    train(&cfg, Some(&ta), &RunOptions::default()).unwrap();
    cfg.method = MethodConfig::baseline();
    train(&cfg, Some(&zero), &RunOptions::default()).unwrap();
    let missing = root.path().join("missing");

    let out = root.path().join("report");
    let md_path = report(&[zero, ta, missing], &out).unwrap();
    let md = std::fs::read_to_string(md_path).unwrap();
    let f = files(&out);
    assert!(f.contains(&"metrics.png".to_string()));
    assert!(f.contains(&"run1_scores.png".to_string()));
    assert!(f.contains(&"run1_heatmaps.json".to_string()));
    assert!(f.iter().any(|n| n.starts_with("run1_M_a_frame")));
    assert!(f.iter().any(|n| n.starts_with("run1_M_m_frame")));
    assert!(!f.iter().any(|n| n.starts_with("run0_")));
    assert!(md.contains("![metrics](metrics.png)"));
    assert!(md.contains("| missing | ? | missing |"));
    assert!(md.contains("No temporal relevance scores in this run"));
    assert!(md.contains("sample figures skipped"));

    let img = image::open(out.join("metrics.png")).unwrap();
    assert_eq!((img.width(), img.height()), (640, 360));
    let heat: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run1_heatmaps.json")).unwrap()).unwrap();
    let rows = heat["m_a"].as_array().unwrap();
    assert_eq!(rows.len(), heat["frames"].as_array().unwrap().len());
    for r in rows {
        let s: f64 = r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cli_gen_corpus_and_config() {
    let root = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_stvg");
    let out = Command::new(exe)
        .env("STVG_OUT", root.path())
        .args(["gen-corpus", "--set", "train_size=3", "--set", "eval_size=2", "--frames", "6"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train = stvg::corpus_io::load_corpus(&root.path().join("corpus/train")).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train[0].frames.shape()[0], 6);

    let out = Command::new(exe)
        .args(["config", "--delta", "0.4", "--w-kl", "2", "--query-mode", "oracle"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = config_file::build(Some(&String::from_utf8(out.stdout).unwrap()), &[]).unwrap();
    assert_eq!(cfg.method.delta, 0.4);
    assert_eq!(cfg.loss.weights.kl, 2.0);
    assert_eq!(cfg.method.query_mode, stvg_core::config::QueryMode::Oracle);

    let out = Command::new(exe).args(["config", "--set", "nope=1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn cli_train_then_eval() {
    let root = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_stvg");
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, config_file::to_toml(&small(&["optim.steps=2"]))).unwrap();
    let out = Command::new(exe)
        .env("STVG_OUT", root.path())
        .args(["train", "--name", "r", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = String::from_utf8(out.stdout).unwrap();
    assert!(first.starts_with("m_tIoU"));
    assert_eq!(read_log(&root.path().join("r")).unwrap().len(), 2);
    let out = Command::new(exe).arg("eval").arg(root.path().join("r")).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), first);
}
