use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use physlatent::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the effective config, stored next to the manifest as
    /// `config.toml`.
    pub config_hash: Option<String>,
    pub seed: u64,
    pub tool_version: String,
    pub output_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

impl RunManifest {
    /// `config` is the source path and the effective config text.
    pub fn new(command: &str, config: Option<(&Path, &str)>, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: config.map(|(p, _)| p.to_path_buf()),
            config_hash: config.map(|(_, text)| sha256_hex(text.as_bytes())),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            output_dir: output_dir.to_path_buf(),
            started: now(),
            finished: None,
        }
    }

    pub fn write(&mut self) -> Result<()> {
        self.finished = Some(now());
        let path = self.output_dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| io(&path, e))
    }
}

/// Raised when the output directory already holds results.
#[derive(Debug)]
pub struct OutputExists(pub PathBuf);

impl std::fmt::Display for OutputExists {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} is not empty; pass --force to overwrite", self.0.display())
    }
}

impl std::error::Error for OutputExists {}

/// Resolves `out` against the output root and makes sure it is empty.
/// With `force` an existing directory is removed first.
pub fn prepare_output(out: &Path, root: Option<&Path>, force: bool) -> std::result::Result<PathBuf, Box<dyn std::error::Error>> {
    let dir = match root {
        Some(r) if out.is_relative() => r.join(out),
        _ => out.to_path_buf(),
    };
    if dir.exists() {
        let non_empty = std::fs::read_dir(&dir).map_err(|e| io(&dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Box::new(OutputExists(dir)));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    Ok(dir)
}
