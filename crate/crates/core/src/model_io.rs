//! On-disk format for a cross-fitted model: magic, format version, CBOR body.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{CrossFit, ImportanceConfig};
use crate::types::{GroupSpec, Task};

pub const MAGIC: &[u8; 8] = b"BCPIMODL";
pub const FORMAT_VERSION: u32 = 1;

/// Everything `importance` needs to score groups without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ImportanceConfig,
    pub groups: GroupSpec,
    pub task: Task,
    pub n_rows: usize,
    pub n_features: usize,
    pub seed: u64,
    pub fit: CrossFit,
}

impl ModelFile {
    /// Wall-clock fields are zeroed so identical fits give identical files.
    pub fn new(config: ImportanceConfig, groups: GroupSpec, task: Task, n_rows: usize, n_features: usize, seed: u64, mut fit: CrossFit) -> Self {
        fit.fit_seconds = 0.0;
        ModelFile {
            config,
            groups,
            task,
            n_rows,
            n_features,
            seed,
            fit,
        }
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedModel(msg.into())
}

pub fn encode_model<W: Write>(mut w: W, model: &ModelFile) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    ciborium::into_writer(model, &mut w).map_err(|e| malformed(e.to_string()))?;
    Ok(())
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or_else(|| malformed("bad magic"))?;
    if rest.len() < 4 {
        return Err(malformed("truncated header"));
    }
    let version = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]);
    if version != FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {version}")));
    }
    let mut body = &rest[4..];
    let model: ModelFile = ciborium::from_reader(&mut body).map_err(|e| malformed(e.to_string()))?;
    if !body.is_empty() {
        return Err(malformed(format!("{} trailing bytes", body.len())));
    }
    model.validate()?;
    Ok(model)
}

impl ModelFile {
    /// Structural checks a decoded file must pass before it is used.
    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| malformed(e.to_string()))?;
        self.groups.validate(self.n_features).map_err(|e| malformed(e.to_string()))?;
        if self.fit.learners.len() != 2 {
            return Err(malformed(format!("expected 2 fold learners, found {}", self.fit.learners.len())));
        }
        if self.fit.plan.folds.len() != self.n_rows {
            return Err(malformed("split plan does not match the row count"));
        }
        for l in &self.fit.learners {
            if l.n_features() != self.n_features || l.task() != self.task {
                return Err(malformed("fold learner does not match the declared shape or task"));
            }
            l.check()?;
        }
        Ok(())
    }
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let mut buf = Vec::new();
    encode_model(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
