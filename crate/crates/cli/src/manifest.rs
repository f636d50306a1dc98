use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use switchdiff::io::Table;
use switchdiff::Result;

/// `run.json`: what ran, on which inputs, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the config file bytes.
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub parameters: serde_json::Value,
    /// Relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Collects artifacts written under one output directory.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<String>,
    started: Instant,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    fn record(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.root.join(name)
    }

    pub fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        let path = self.record(name);
        table.save(&path)
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.record(name);
        fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<()> {
        manifest.artifacts = self.artifacts;
        manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        fs::write(self.root.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}
