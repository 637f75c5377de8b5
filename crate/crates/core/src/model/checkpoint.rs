//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (configuration, dataset statistics, normalization,
//! metadata, tensor index) and the raw little-endian tensor payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use super::state::{ModelState, Normalization, TrainMeta};
use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRMNETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Storage width of tensor values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Lossless; reloading reproduces forward passes bit for bit.
    #[default]
    F64,
    /// Half the size; values are rounded on save.
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Section {
    Param,
    Buffer,
    Extra,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    section: Section,
    shape: Vec<u64>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    stats: DatasetStats,
    norm: Normalization,
    meta: TrainMeta,
    precision: Precision,
    tensors: Vec<Entry>,
}

/// A model plus any auxiliary tensors (optimizer state) saved with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub extras: BTreeMap<String, Tensor>,
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        let path = path.as_ref();
        let sections = [
            (Section::Param, &self.state.params),
            (Section::Buffer, &self.state.buffers),
            (Section::Extra, &self.extras),
        ];
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (section, map) in sections {
            for (name, t) in map {
                tensors.push(Entry {
                    name: name.clone(),
                    section,
                    shape: t.shape().iter().map(|&d| d as u64).collect(),
                    offset,
                });
                offset += (t.len() * precision.width()) as u64;
            }
        }
        let header = Header {
            arch: self.state.arch.clone(),
            stats: self.state.stats,
            norm: self.state.norm,
            meta: self.state.meta,
            precision,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, map) in sections {
            for t in map.values() {
                for &v in t.data() {
                    match precision {
                        Precision::F64 => w.write_all(&v.to_le_bytes())?,
                        Precision::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(load_err(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(load_err(
                path,
                format!("format version {version}, this build reads {FORMAT_VERSION}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| load_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])
            .map_err(|e| load_err(path, format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        let width = header.precision.width();
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for e in header.tensors {
            let shape: Vec<usize> = e.shape.iter().map(|&d| d as usize).collect();
            let len: usize = shape.iter().product();
            let start = e.offset as usize;
            let raw = start
                .checked_add(len * width)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| load_err(path, format!("tensor {} out of range", e.name)))?;
            let data = match header.precision {
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            let t = Tensor::from_vec(&shape, data)?;
            let map = match e.section {
                Section::Param => &mut params,
                Section::Buffer => &mut buffers,
                Section::Extra => &mut extras,
            };
            map.insert(e.name, t);
        }
        let state = ModelState {
            arch: header.arch,
            stats: header.stats,
            norm: header.norm,
            params,
            buffers,
            meta: header.meta,
        };
        state
            .check_shapes()
            .map_err(|e| load_err(path, e.to_string()))?;
        Ok(Checkpoint { state, extras })
    }
}

impl ModelState {
    /// Lossless save without auxiliary tensors.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint {
            state: self.clone(),
            extras: BTreeMap::new(),
        }
        .save(path, Precision::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Checkpoint::load(path)?.state)
    }
}
