//! Defaults loaded from a TOML or JSON file and merged under command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use connlens::geometry::{Metric, Pooling};
use connlens::recon::{Activation, Arch, TrainerConfig};
use connlens::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::GlobalArgs;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub metric: Option<Metric>,
    pub pooling: Option<Pooling>,
    pub trainer: Option<TrainerConfig>,
    pub model: ModelDefaults,
}

/// Model settings a config file may preset for `recon-train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDefaults {
    pub arch: Option<Arch>,
    pub hidden: Option<Vec<usize>>,
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub activation: Option<Activation>,
}

impl FileConfig {
    /// Parses `path` as JSON when it ends in `.json`, as TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        }
    }
}

/// Resolved settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub file: FileConfig,
}

impl Context {
    pub fn resolve(args: &GlobalArgs, file: FileConfig) -> Result<Self> {
        let threads = args.threads.or(file.threads);
        if let Some(n) = threads {
            if n == 0 {
                return Err(Error::InvalidConfig("--threads must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        }
        let out_dir = args
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out_dir).map_err(|source| Error::File {
            path: out_dir.clone(),
            source,
        })?;
        Ok(Self {
            seed: args.seed.or(file.seed).unwrap_or(0),
            out_dir,
            file,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        fs::write(
            &t,
            "seed = 7\nks = [5, 10]\nmetric = \"ip\"\n[trainer]\nlr = 0.001\n[model]\narch = \"seqreg\"\nwidth = 64\n",
        )
        .unwrap();
        fs::write(
            &j,
            r#"{"seed": 7, "ks": [5, 10], "metric": "ip", "trainer": {"lr": 0.001}, "model": {"arch": "seqreg", "width": 64}}"#,
        )
        .unwrap();
        let a = FileConfig::load(&t).unwrap();
        assert_eq!(a, FileConfig::load(&j).unwrap());
        let trainer = a.trainer.unwrap();
        assert_eq!(trainer.lr, 0.001);
        assert_eq!(trainer.batch_size, TrainerConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(&t, "sede = 7\n").unwrap();
        assert!(FileConfig::load(&t).is_err());
    }
}
