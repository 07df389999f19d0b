//! Checkpoints: `weights.bin` (parameters and Adam moments), `vocab.json` and `manifest.json`.
//!
//! `weights.bin` layout, little-endian: magic `STVGCKP1`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and three `f64` arrays
//! (value, Adam first moment, Adam second moment).
//!
//! Which tensors exist depends on the method: zero-query and oracle runs carry no `tts.*` or
//! `asa.*` tensors; every other name is shared with target-aware runs, which is what makes a
//! baseline checkpoint loadable into the shared part of a target-aware model.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stvg_core::config::RunConfig;
use stvg_core::model::{Model, Vocabularies};
use stvg_core::optim::Adam;

use crate::error::{Error, IoContext, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"STVGCKP1";
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const VOCAB: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// SHA-256 of the JSON-serialised configuration.
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Completed optimisation steps.
    pub step: usize,
    pub adam_t: u64,
    pub weights_file: String,
    pub vocab_file: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

/// Model state as restored from disk.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub adam: Adam,
}

pub fn save(dir: &Path, model: &Model, adam: &Adam, step: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).at(dir)?;
    adam.check(&model.store)?;
    let weights = dir.join(WEIGHTS);
    let mut w = BufWriter::new(fs::File::create(&weights).at(&weights)?);
    let mut put = |bytes: &[u8]| w.write_all(bytes).at(&weights);
    put(WEIGHTS_MAGIC)?;
    put(&(model.store.len() as u32).to_le_bytes())?;
    let mut tensors = Vec::with_capacity(model.store.len());
    for (i, (_, p)) in model.store.iter().enumerate() {
        put(&(p.name.len() as u32).to_le_bytes())?;
        put(p.name.as_bytes())?;
        put(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for arr in [p.value.data(), &adam.m[i], &adam.v[i]] {
            for v in arr {
                put(&v.to_le_bytes())?;
            }
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            group: format!("{:?}", p.group),
        });
    }
    w.flush().at(&weights)?;
    drop(w);

    let vocab = dir.join(VOCAB);
    fs::write(&vocab, serde_json::to_vec_pretty(&model.vocab)?).at(&vocab)?;
    let manifest = Manifest {
        format: 1,
        config_hash: config_hash(&model.config),
        config: model.config.clone(),
        seed: model.config.seed,
        step,
        adam_t: adam.t,
        weights_file: WEIGHTS.into(),
        vocab_file: VOCAB.into(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "unexpected end of file".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&path).at(&path)?)?;
    let bad = |p: &Path, detail: String| Error::Format {
        path: p.to_path_buf(),
        detail,
    };
    if manifest.config_hash != config_hash(&manifest.config) {
        return Err(bad(&path, "config hash does not match the stored config".into()));
    }
    let vpath = dir.join(&manifest.vocab_file);
    let vocab: Vocabularies = serde_json::from_slice(&fs::read(&vpath).at(&vpath)?)?;
    let mut model = Model::new(&manifest.config, vocab)?;

    let wpath = dir.join(&manifest.weights_file);
    let mut bytes = Vec::new();
    fs::File::open(&wpath).at(&wpath)?.read_to_end(&mut bytes).at(&wpath)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path: &wpath,
    };
    if c.take(8)? != WEIGHTS_MAGIC {
        return Err(bad(&wpath, "not a checkpoint (bad magic)".into()));
    }
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(bad(
            &wpath,
            format!("{} tensors stored, model has {}", count, model.store.len()),
        ));
    }
    let mut adam = Adam::new(&model.store);
    adam.t = manifest.adam_t;
    for (i, p) in model.store.iter_mut().enumerate() {
        let len = c.u32()? as usize;
        let name = String::from_utf8_lossy(c.take(len)?).into_owned();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(bad(
                &wpath,
                format!("tensor {} is {} {:?}, model expects {} {:?}", i, name, shape, p.name, p.value.shape()),
            ));
        }
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&c.f64s(n)?);
        adam.m[i] = c.f64s(n)?;
        adam.v[i] = c.f64s(n)?;
    }
    if c.pos != bytes.len() {
        return Err(bad(&wpath, "trailing bytes".into()));
    }
    Ok(Checkpoint { manifest, model, adam })
}
