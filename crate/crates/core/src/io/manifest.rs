//! JSON-lines pair manifest and generic JSON-lines record streams.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RigidTransform;

/// Orthonormality tolerance applied to manifest transforms.
pub const TRANSFORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    /// Paths are relative to the manifest's directory unless absolute.
    pub src: String,
    pub dst: String,
    /// Row-major 4×4, meters. Maps `src` into the frame of `dst`.
    pub t_gt: [[f64; 4]; 4],
    pub scene: String,
    pub overlap: f64,
}

impl PairManifestEntry {
    pub fn transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_rows(&self.t_gt, TRANSFORM_TOL)
    }

    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.src), base.join(&self.dst))
    }

    pub fn id(&self) -> String {
        format!("{}:{}", self.src, self.dst)
    }
}

/// Parses manifest text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<PairManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let entry: PairManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        entry.transform().map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&entry.overlap) {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("overlap {} outside [0, 1]", entry.overlap),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn encode_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn write_manifest(entries: &[PairManifestEntry], path: &Path) -> Result<()> {
    write_jsonl(entries, path)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(encode_jsonl(items)?.as_bytes())?;
    Ok(())
}
