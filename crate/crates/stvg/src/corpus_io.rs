//! Corpus directories: `index.jsonl` plus one binary frame tensor per sample.
//!
//! Each index line is a JSON object with the fields
//! `id`, `frames` (file name under `frames/`), `text`, `gt_span` (`[start, end]`, inclusive),
//! `gt_boxes` (`[[cx, cy, w, h], ...]`, one per span frame, normalised), `appearance_label`,
//! `motion_label`, `subject_token_span` and `objects` (the scene description).
//!
//! Tensor files start with the 8-byte magic `STVGTEN1`, then a little-endian `u32` rank,
//! `rank` little-endian `u64` dimensions and the values as little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stvg_core::corpus::{BoxCxCyWh, SceneObject, VideoSample};
use stvg_core::tensor::Tensor;

use crate::error::{Error, IoContext, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"STVGTEN1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: usize,
    pub frames: String,
    pub text: String,
    pub gt_span: (usize, usize),
    pub gt_boxes: Vec<BoxCxCyWh>,
    pub appearance_label: Vec<f64>,
    pub motion_label: Vec<f64>,
    pub subject_token_span: (usize, usize),
    pub objects: Vec<SceneObject>,
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    let mut head = Vec::with_capacity(12 + 8 * t.shape().len());
    head.extend_from_slice(TENSOR_MAGIC);
    head.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        head.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.write_all(&head).at(path)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes()).at(path)?;
    }
    w.flush().at(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("not a tensor file (bad magic)".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + 8 * rank;
    if bytes.len() < body {
        return Err(bad(format!("truncated header for rank {}", rank)));
    }
    let shape: Vec<usize> = bytes[12..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != body + 8 * n {
        return Err(bad(format!(
            "shape {:?} needs {} values, file holds {} bytes of data",
            shape,
            n,
            bytes.len() - body
        )));
    }
    let data = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&shape, data))
}

pub fn save_corpus(dir: &Path, samples: &[VideoSample]) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).at(&frames_dir)?;
    let index = dir.join("index.jsonl");
    let mut w = BufWriter::new(fs::File::create(&index).at(&index)?);
    for (id, s) in samples.iter().enumerate() {
        let file = format!("{:06}.bin", id);
        write_tensor(&frames_dir.join(&file), &s.frames)?;
        let entry = IndexEntry {
            id,
            frames: file,
            text: s.text.clone(),
            gt_span: s.gt_span,
            gt_boxes: s.gt_boxes.clone(),
            appearance_label: s.appearance_label.clone(),
            motion_label: s.motion_label.clone(),
            subject_token_span: s.subject_token_span,
            objects: s.objects.clone(),
        };
        serde_json::to_writer(&mut w, &entry)?;
        w.write_all(b"\n").at(&index)?;
    }
    w.flush().at(&index)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<VideoSample>> {
    let index = dir.join("index.jsonl");
    let r = BufReader::new(fs::File::open(&index).at(&index)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.at(&index)?;
        if line.trim().is_empty() {
            continue;
        }
        let e: IndexEntry = serde_json::from_str(&line).map_err(|err| Error::Format {
            path: index.clone(),
            detail: format!("line {}: {}", i + 1, err),
        })?;
        let frames = read_tensor(&dir.join("frames").join(&e.frames))?;
        let n = e.gt_span.1 + 1;
        if e.gt_span.0 > e.gt_span.1 || frames.shape().first().is_none_or(|&f| f < n) {
            return Err(Error::Format {
                path: index.clone(),
                detail: format!("line {}: span {:?} outside the frames", i + 1, e.gt_span),
            });
        }
        out.push(VideoSample {
            frames,
            text: e.text,
            gt_boxes: e.gt_boxes,
            gt_span: e.gt_span,
            appearance_label: e.appearance_label,
            motion_label: e.motion_label,
            subject_token_span: e.subject_token_span,
            objects: e.objects,
        });
    }
    Ok(out)
}
