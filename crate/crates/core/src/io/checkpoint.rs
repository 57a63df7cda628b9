//! `DBEC` checkpoint archive.
//!
//! Layout: `b"DBEC"`, one version byte, metadata length as `u64` LE, UTF-8
//! JSON metadata, then the row-major `f32` LE payloads of every tensor in
//! table order. Offsets in the table are byte offsets into the payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{DbeNet, ModelConfig, Teacher};
use crate::kpfcn::KernelDisposition;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DBEC";
pub const VERSION: u8 = 1;
const PREFIX_LEN: usize = 4 + 1 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    kind: CheckpointKind,
    config: ModelConfig,
    kernel: Option<KernelDisposition>,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the architecture needed to rebuild a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    /// Kernel-point disposition; student checkpoints only.
    pub kernel: Option<KernelDisposition>,
    pub seed: u64,
    pub tensors: IndexMap<String, Tensor<f32>>,
    /// CRC-32 per tensor as recorded in the file; recomputed on save.
    stored_crc: IndexMap<String, u32>,
}

fn crc_of(t: &Tensor<f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in t.data() {
        h.update(&v.to_le_bytes());
    }
    h.finalize()
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    fn from_store(kind: CheckpointKind, config: ModelConfig, kernel: Option<KernelDisposition>, seed: u64, store: &ParamStore<f32>) -> Self {
        let tensors: IndexMap<String, Tensor<f32>> = store.iter().map(|(n, p)| (n.clone(), p.tensor.clone())).collect();
        let stored_crc = tensors.iter().map(|(n, t)| (n.clone(), crc_of(t))).collect();
        Self {
            kind,
            config,
            kernel,
            seed,
            tensors,
            stored_crc,
        }
    }

    pub fn from_student(net: &DbeNet, seed: u64) -> Self {
        Self::from_store(CheckpointKind::Student, net.config.clone(), Some(net.kernel.clone()), seed, &net.params)
    }

    pub fn from_teacher(net: &Teacher, seed: u64) -> Self {
        Self::from_store(CheckpointKind::Teacher, net.config.clone(), None, seed, &net.params)
    }

    /// Copies every tensor the network declares; extra tensors are ignored.
    fn fill(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, p) in store.iter_mut() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| format_err(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != p.tensor.shape() {
                return Err(format_err(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn to_student(&self) -> Result<DbeNet> {
        if self.kind != CheckpointKind::Student {
            return Err(format_err("checkpoint holds a teacher, not a student"));
        }
        let mut net = DbeNet::new(self.config.clone(), 0)?;
        if let Some(k) = &self.kernel {
            net.kernel = k.clone();
        }
        self.fill(&mut net.params)?;
        Ok(net)
    }

    pub fn to_teacher(&self) -> Result<Teacher> {
        if self.kind != CheckpointKind::Teacher {
            return Err(format_err("checkpoint holds a student, not a teacher"));
        }
        let mut net = Teacher::new(self.config.clone(), 0)?;
        self.fill(&mut net.params)?;
        Ok(net)
    }

    /// Names of tensors whose contents disagree with the recorded CRC-32.
    pub fn verify_checksums(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(n, t)| self.stored_crc.get(*n) != Some(&crc_of(t)))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                crc32: crc_of(t),
            });
            offset += 4 * t.len();
        }
        let meta = Metadata {
            kind: self.kind,
            config: self.config.clone(),
            kernel: self.kernel.clone(),
            seed: self.seed,
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Validates magic, version, name uniqueness and payload bounds. Checksums
    /// are not enforced here; see [`Checkpoint::verify_checksums`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN || &bytes[..4] != MAGIC {
            return Err(format_err("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(format_err(format!("unsupported version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let meta_end = usize::try_from(len)
            .ok()
            .and_then(|l| PREFIX_LEN.checked_add(l))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err("metadata length exceeds file"))?;
        let meta: Metadata =
            serde_json::from_slice(&bytes[PREFIX_LEN..meta_end]).map_err(|e| format_err(format!("metadata: {e}")))?;
        let payload = &bytes[meta_end..];
        let mut tensors = IndexMap::with_capacity(meta.tensors.len());
        let mut stored_crc = IndexMap::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err(format!("tensor `{}` shape overflows", e.name)))?;
            let end = numel
                .checked_mul(4)
                .and_then(|b| b.checked_add(e.offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| format_err(format!("tensor `{}` lies outside the payload", e.name)))?;
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
                return Err(format_err(format!("duplicate tensor `{}`", e.name)));
            }
            stored_crc.insert(e.name.clone(), e.crc32);
        }
        Ok(Self {
            kind: meta.kind,
            config: meta.config,
            kernel: meta.kernel,
            seed: meta.seed,
            tensors,
            stored_crc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads and parses `path`, rejecting any tensor whose CRC-32 mismatches.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        let bad = ck.verify_checksums();
        if !bad.is_empty() {
            return Err(format_err(format!("checksum mismatch in {}", bad.join(", "))));
        }
        Ok(ck)
    }
}
