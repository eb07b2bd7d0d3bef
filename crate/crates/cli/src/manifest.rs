use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use noisefit::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Everything needed to reproduce one command: what ran, with which
/// settings, on which inputs, and what it wrote.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub dry_run: bool,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, dry_run: bool) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            dry_run,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            summary: None,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Writes `text` to `path` and records it.
    pub fn write(&mut self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text)?;
        self.artifact(path)
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn lap(&mut self, label: &str, since: Instant) {
        self.timings.insert(format!("{label}_seconds"), since.elapsed().as_secs_f64());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        if let Some(t) = self.started.take() {
            self.timings.insert("total_seconds".into(), t.elapsed().as_secs_f64());
        }
        std::fs::write(path, noisefit::json::to_string(&self)?)?;
        Ok(())
    }
}

/// `<out>.manifest.json` beside the primary output, else one named after
/// the command in the working directory.
pub fn default_path(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(o) => {
            let mut s = o.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from(format!("noisefit-{command}.manifest.json")),
    }
}
