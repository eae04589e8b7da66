//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `VSEGCKPT`, a little-endian `u32` format version,
//! a `u64` header length, the JSON header, then every tensor as little-endian
//! `f32` values in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec, RunningStats};
use crate::tensor::Tensor;
use crate::uncertainty::UncertaintyParams;

pub const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const VERSION: u32 = 1;

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// Adam state of the two log-variance scalars, kept in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub m: [f64; 2],
    pub v: [f64; 2],
    pub t: u64,
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: Config,
    pub step: u64,
    pub uncertainty: UncertaintyParams,
    pub adam: AdamState,
    pub scalar_adam: ScalarAdam,
    pub rng: RngState,
    pub best_auc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    config: Config,
    config_hash: String,
    step: u64,
    uncertainty: UncertaintyParams,
    adam_t: u64,
    scalar_adam: ScalarAdam,
    rng: RngState,
    best_auc: Option<f64>,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        let tensors = self
            .model
            .params
            .params()
            .map(|(n, t)| (format!("param/{n}"), t))
            .chain(self.adam.m.iter().map(|(n, t)| (format!("adam_m/{n}"), t)))
            .chain(self.adam.v.iter().map(|(n, t)| (format!("adam_v/{n}"), t)));
        for (name, t) in tensors {
            entries.push(TensorEntry { name, shape: t.shape().to_vec() });
            blobs.push(t.data());
        }
        for (n, r) in self.model.params.buffers() {
            entries.push(TensorEntry { name: format!("bn_mean/{n}"), shape: vec![r.mean.len()] });
            blobs.push(&r.mean);
            entries.push(TensorEntry { name: format!("bn_var/{n}"), shape: vec![r.var.len()] });
            blobs.push(&r.var);
        }
        let header = Header {
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            uncertainty: self.uncertainty,
            adam_t: self.adam.t,
            scalar_adam: self.scalar_adam,
            rng: self.rng,
            best_auc: self.best_auc,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        // write to a sibling file first so an interrupted save keeps the old one
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for b in blobs {
                for v in b {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ckpt_err(format!("{} is not a checkpoint", path.display())));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let mut json = vec![0u8; u64::from_le_bytes(u64b) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.config_hash != header.config.hash() {
            return Err(ckpt_err("configuration hash mismatch"));
        }
        let mut model = Model::build(header.spec, 0)?;
        let mut adam = AdamState { t: header.adam_t, ..AdamState::default() };
        let mut bn_mean: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut seen = 0usize;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let (kind, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| ckpt_err(format!("bad tensor entry {}", e.name)))?;
            match kind {
                "param" => {
                    model.params.set(name, Tensor::from_vec(&e.shape, data)?)?;
                    seen += 1;
                }
                "adam_m" => {
                    adam.m.insert(name.to_owned(), Tensor::from_vec(&e.shape, data)?);
                }
                "adam_v" => {
                    adam.v.insert(name.to_owned(), Tensor::from_vec(&e.shape, data)?);
                }
                "bn_mean" => {
                    bn_mean.insert(name.to_owned(), data);
                }
                "bn_var" => {
                    let mean = bn_mean
                        .remove(name)
                        .ok_or_else(|| ckpt_err(format!("variance before mean for {name}")))?;
                    model.params.set_buffer(name, RunningStats { mean, var: data })?;
                }
                other => return Err(ckpt_err(format!("unknown tensor kind {other}"))),
            }
        }
        if seen != model.params.names().len() {
            return Err(ckpt_err(format!(
                "checkpoint holds {seen} of {} parameters",
                model.params.names().len()
            )));
        }
        Ok(Self {
            model,
            config: header.config,
            step: header.step,
            uncertainty: header.uncertainty,
            adam,
            scalar_adam: header.scalar_adam,
            rng: header.rng,
            best_auc: header.best_auc,
        })
    }
}
