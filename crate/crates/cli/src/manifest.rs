use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use icdlaat_core::trainer::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_sha256: Option<String>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub metrics: Value,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn start(command: &str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: Value::Null,
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
                vocab_sha256: None,
                labels_sha256: None,
                started_unix,
                wall_clock_seconds: 0.0,
                metrics: Value::Null,
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<&mut Self> {
        self.manifest.inputs.push(FileDigest::of(path)?);
        Ok(self)
    }

    pub fn artifact(&mut self, path: &Path) -> anyhow::Result<&mut Self> {
        self.manifest.artifacts.push(FileDigest::of(path)?);
        Ok(self)
    }

    pub fn digests(&mut self, vocab: &str, labels: &str) -> &mut Self {
        self.manifest.vocab_sha256 = Some(sha256_hex(vocab.as_bytes()));
        self.manifest.labels_sha256 = Some(sha256_hex(labels.as_bytes()));
        self
    }

    pub fn metrics(&mut self, metrics: impl Serialize) -> &mut Self {
        self.manifest.metrics = serde_json::to_value(metrics).expect("metrics serialize");
        self
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing run manifest {}", path.display()))?;
        Ok(self.manifest)
    }
}

/// `<path>.<suffix>` alongside `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
