//! Markdown summary and figures for one or more run directories.

use std::fs;
use std::path::{Path, PathBuf};

use stvg_core::config::RunConfig;
use stvg_core::metrics::EvalResult;
use stvg_core::model::Prediction;
use stvg_core::train::Dataset;

use crate::config_file;
use crate::error::{IoContext, Result};
use crate::experiments::{CONFIG, EVAL, PREDICTIONS};
use crate::plot;

struct Run {
    name: String,
    config: Option<RunConfig>,
    eval: Option<EvalResult>,
    predictions: Option<Vec<Prediction>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

fn load(dir: &Path) -> Run {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Run {
        name,
        config: config_file::load(Some(&dir.join(CONFIG)), &[]).ok(),
        eval: read_json(&dir.join(EVAL)),
        predictions: read_json(&dir.join(PREDICTIONS)),
    }
}

fn color_name(i: usize) -> String {
    let [r, g, b] = plot::series_color(i);
    format!("#{:02x}{:02x}{:02x}", r, g, b)
}

/// Writes `report.md` and PNG figures into `out`; returns the markdown path.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).at(out)?;
    let runs: Vec<Run> = run_dirs.iter().map(|d| load(d)).collect();
    let mut md = String::from("# Run report\n\n## Metrics\n\n");
    md.push_str("| Run | Queries | m_tIoU | m_vIoU | vIoU@0.3 | vIoU@0.5 |\n|---|---|---|---|---|---|\n");
    let mut bars = Vec::new();
    let mut legend = Vec::new();
    for r in &runs {
        let mode = r
            .config
            .as_ref()
            .map(|c| format!("{:?}", c.method.query_mode))
            .unwrap_or_else(|| "?".into());
        match &r.eval {
            Some(e) => {
                let h = e.headline();
                md.push_str(&format!(
                    "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
                    r.name, mode, h[0], h[1], h[2], h[3]
                ));
                legend.push(format!("{} = {}", color_name(bars.len()), r.name));
                bars.push(h);
            }
            None => md.push_str(&format!("| {} | {} | missing | missing | missing | missing |\n", r.name, mode)),
        }
    }
    if bars.is_empty() {
        md.push_str("\nNo run has `eval.json`; metric chart skipped.\n");
    } else {
        plot::grouped_bars(&bars, &out.join("metrics.png"))?;
        md.push_str(&format!(
            "\n![metrics](metrics.png)\n\nGroups left to right: m_tIoU, m_vIoU, vIoU@0.3, vIoU@0.5. Bars: {}.\n",
            legend.join(", ")
        ));
    }

    for (k, r) in runs.iter().enumerate() {
        md.push_str(&format!("\n## {}\n\n", r.name));
        let (Some(cfg), Some(preds)) = (&r.config, &r.predictions) else {
            md.push_str("Missing `config.toml` or `predictions.json`; sample figures skipped.\n");
            continue;
        };
        let Some(p) = preds.first() else {
            md.push_str("No predictions.\n");
            continue;
        };
        let data = Dataset::generate(cfg)?;
        let sample = &data.eval[0];
        md.push_str(&format!(
            "Sample 0: \"{}\", groundtruth span {:?}, predicted span {:?}.\n\n",
            sample.text, sample.gt_span, p.tube.span
        ));
        match &p.relevance {
            Some(rel) => {
                let name = format!("run{}_scores.png", k);
                let mut curves: Vec<&[f64]> = vec![&rel.s];
                if !rel.s_a.is_empty() {
                    curves.push(&rel.s_a);
                }
                if !rel.s_m.is_empty() {
                    curves.push(&rel.s_m);
                }
                plot::frame_curves(&curves, sample.gt_span, Some(cfg.method.theta), &out.join(&name))?;
                md.push_str(&format!(
                    "![relevance]({})\n\nFused score s ({}), appearance and motion scores when present; shaded frames are the groundtruth span, the dashed line is theta. Selected frames: {:?}.\n\n",
                    name,
                    color_name(0),
                    rel.indices
                ));
            }
            None => md.push_str("No temporal relevance scores in this run; curve skipped.\n\n"),
        }
        let (h, w) = (cfg.scene.frame_height, cfg.scene.frame_width);
        let grid = cfg.grid();
        let frames: Vec<usize> = p
            .relevance
            .as_ref()
            .map(|r| r.indices.clone())
            .unwrap_or_else(|| (0..sample.frame_count()).collect());
        let mut any = false;
        for (label, map) in [("M_a", &p.m_a), ("M_m", &p.m_m)] {
            let Some(m) = map else { continue };
            let hw = grid.0 * grid.1;
            for (row, &f) in frames.iter().enumerate().take(4) {
                let name = format!("run{}_{}_frame{}.png", k, label, f);
                let frame = &sample.frames.data()[f * h * w * 3..(f + 1) * h * w * 3];
                plot::overlay(frame, (h, w), &m.data()[row * hw..(row + 1) * hw], grid, 8, &out.join(&name))?;
                md.push_str(&format!("![{} frame {}]({}) ", label, f, name));
                any = true;
            }
            md.push_str(&format!("\n\n{} activation on sampled frames.\n\n", label));
        }
        if any {
            let rows = |m: &Option<stvg_core::tensor::Tensor>| {
                m.as_ref().map(|t| t.data().chunks(grid.0 * grid.1).map(<[f64]>::to_vec).collect::<Vec<_>>())
            };
            let heat = serde_json::json!({
                "frames": frames,
                "grid": [grid.0, grid.1],
                "m_a": rows(&p.m_a),
                "m_m": rows(&p.m_m),
            });
            let name = format!("run{}_heatmaps.json", k);
            let path = out.join(&name);
            fs::write(&path, serde_json::to_vec_pretty(&heat)?).at(&path)?;
            md.push_str(&format!("Per-frame heat grids: [{}]({}).\n", name, name));
        } else {
            md.push_str("No activation maps in this run; overlays skipped.\n");
        }
    }
    let path = out.join("report.md");
    fs::write(&path, md).at(&path)?;
    Ok(path)
}
