use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "fp8flow";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub mode: Option<String>,
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Hex digest of the tool version, command and resolved config.
pub fn run_id(command: &str, config: &Value) -> String {
    let mut h = Sha256::new();
    h.update(TOOL.as_bytes());
    h.update(VERSION.as_bytes());
    h.update(command.as_bytes());
    h.update(config.to_string().as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, seed: u64, mode: Option<&str>, timestamps: bool) -> Self {
        Self {
            tool: TOOL,
            version: VERSION,
            run_id: run_id(command, &config),
            command: command.to_string(),
            config,
            seed,
            mode: mode.map(str::to_string),
            started_at: timestamps.then(unix_now),
            finished_at: None,
            outputs: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Stamps the end time (when timestamps are on) and writes the manifest.
    pub fn finish(&mut self, path: &Path) -> io::Result<()> {
        if self.started_at.is_some() {
            self.finished_at = Some(unix_now());
        }
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

/// Manifest location for a file output: `<file>.manifest.json`.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}
