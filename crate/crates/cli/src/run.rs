//! Run directories: deterministic artifacts plus a manifest of content hashes.
//! Timestamps only ever go to the `run.log` sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const LOG_FILE: &str = "run.log";

pub struct RunDir {
    pub root: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    path: &'a str,
    sha256: String,
    bytes: usize,
}

impl RunDir {
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { root, files: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes `rel` under the run directory and records it in the manifest.
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        self.write(rel, s)
    }

    /// Writes `manifest.json` listing every produced file with its hash.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.files.sort();
        let mut entries = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = fs::read(self.root.join(rel)).map_err(|e| CliError::Io(format!("{rel}: {e}")))?;
            entries.push(ManifestEntry {
                path: rel,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len(),
            });
        }
        let mut s = serde_json::to_string_pretty(&entries).map_err(|e| CliError::Io(e.to_string()))?;
        s.push('\n');
        fs::write(self.root.join("manifest.json"), s).map_err(|e| CliError::Io(e.to_string()))?;
        Ok(self.root)
    }
}

/// Writes log records to stderr and to the run's log file.
struct Tee {
    file: Option<Mutex<fs::File>>,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = &self.file {
            f.lock().expect("log file lock").write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()
    }
}

/// Installs the global logger (default level `info`, `RUST_LOG` overrides).
pub fn init_logging(log_file: Option<&Path>) {
    let file = log_file.and_then(|p| {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .ok()
            .map(Mutex::new)
    });
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
}
