//! JSON report envelope shared by every command.
//!
//! The `meta` and `result` fields depend only on the inputs, the configuration
//! and the seed, so reruns produce identical values there. Wall-clock data is
//! confined to the `run` field.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::TOOL_VERSION;

pub const ASSUME_SELF_EXCLUDED: &str = "each query is excluded from its own neighbor list";
pub const ASSUME_ID_TIE_BREAK: &str = "equal-distance neighbors are ordered by ascending sample id";
pub const ASSUME_PER_DIM_NORM: &str = "normalization statistics are per-dimension mean and population std (floor 1e-6)";
pub const ASSUME_SAMPLE_MEAN_LOSS: &str = "per-sample reconstruction loss is the mean over patches";
pub const ASSUME_NORMALIZED_UNITS: &str = "patch losses are measured on normalized embeddings";
pub const ASSUME_SEQREG_EXPANSION: &str = "seqreg expands S_post tokens to S_pre positions by nearest-index repetition";
pub const ASSUME_SEQREG_POSITIONS: &str = "seqreg adds fixed sinusoidal positional encodings";
pub const ASSUME_SEQREG_ENCODER: &str = "seqreg uses a pre-layer-norm transformer encoder";
pub const ASSUME_GELU: &str = "GELU uses the tanh approximation";
pub const ASSUME_MEAN_POOLING: &str = "alignment and overlap use mean-pooled vectors";

/// Assumptions attached to reports of a given command.
pub fn assumptions_for(command: &str) -> Vec<String> {
    let list: &[&str] = match command {
        "knor" => &[ASSUME_SELF_EXCLUDED, ASSUME_ID_TIE_BREAK, ASSUME_MEAN_POOLING],
        "retrieve" => &[ASSUME_SELF_EXCLUDED, ASSUME_ID_TIE_BREAK, ASSUME_MEAN_POOLING],
        "recon-train" | "recon-eval" => &[
            ASSUME_PER_DIM_NORM,
            ASSUME_SAMPLE_MEAN_LOSS,
            ASSUME_NORMALIZED_UNITS,
            ASSUME_SEQREG_EXPANSION,
            ASSUME_SEQREG_POSITIONS,
            ASSUME_SEQREG_ENCODER,
            ASSUME_GELU,
        ],
        "procrustes" => &[ASSUME_MEAN_POOLING],
        "correlate" => &[ASSUME_SAMPLE_MEAN_LOSS],
        _ => &[],
    };
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub crc32: String,
    pub bytes: u64,
}

impl InputDigest {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (crc, bytes) = file_crc32(path)?;
        Ok(Self {
            path: path.display().to_string(),
            crc32: format!("{crc:08x}"),
            bytes,
        })
    }
}

/// Streaming CRC32 and length of a file.
pub fn file_crc32(path: impl AsRef<Path>) -> Result<(u32, u64)> {
    let path = path.as_ref();
    let wrap = |source| Error::File {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(wrap)?);
    let mut hasher = crc32fast::Hasher::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf).map_err(wrap)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hasher.finalize(), total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub assumptions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ReportMeta {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            assumptions: assumptions_for(command),
            warnings: Vec::new(),
        }
    }

    pub fn with_input(mut self, path: impl AsRef<Path>) -> Result<Self> {
        self.inputs.push(InputDigest::of(path)?);
        Ok(self)
    }
}

/// Wall-clock information, kept apart from reproducible content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

impl RunInfo {
    pub fn since(start: SystemTime) -> Self {
        let now = SystemTime::now();
        Self {
            started_unix_ms: start.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
            elapsed_ms: now.duration_since(start).map_or(0, |d| d.as_millis()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub meta: ReportMeta,
    pub result: T,
    pub run: RunInfo,
}

impl<T: Serialize> Report<T> {
    pub fn new(meta: ReportMeta, result: T, started: SystemTime) -> Self {
        Self {
            meta,
            result,
            run: RunInfo::since(started),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_matches_one_shot() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"123456789").unwrap();
        let (crc, len) = file_crc32(&p).unwrap();
        assert_eq!(crc, 0xCBF4_3926);
        assert_eq!(len, 9);
    }

    #[test]
    fn meta_is_reproducible() {
        let a = ReportMeta::new("knor", 3, serde_json::json!({"k": [10]}));
        let b = ReportMeta::new("knor", 3, serde_json::json!({"k": [10]}));
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.assumptions.iter().any(|s| s == ASSUME_SELF_EXCLUDED));
    }
}
