//! Per-invocation run records. The manifest is written once, before any
//! stage runs; the matching `.result.json` appears only when the command
//! finishes, so an interrupted run is a manifest without a result.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const VERSION: &str = concat!("recid ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub version: String,
    pub started_at: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCompletion {
    pub finished_at: String,
    pub exit_code: u8,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

/// Handle on a written manifest; `finish` records the outcome next to it.
#[derive(Debug)]
pub struct ManifestFile {
    pub path: PathBuf,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, seeds: Vec<u64>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            version: VERSION.to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            seeds,
            outputs,
        }
    }

    /// Writes `<dir>/manifests/<command>-<stamp>.json`, refusing to overwrite.
    pub fn write(&self, dir: &Path) -> std::io::Result<ManifestFile> {
        let mdir = dir.join("manifests");
        std::fs::create_dir_all(&mdir)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ");
        let path = mdir.join(format!("{}-{stamp}-{}.json", self.command, std::process::id()));
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        f.write_all(serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes())?;
        f.write_all(b"\n")?;
        Ok(ManifestFile { path })
    }
}

impl ManifestFile {
    pub fn result_path(&self) -> PathBuf {
        self.path.with_extension("result.json")
    }

    pub fn finish(&self, exit_code: u8, error: Option<String>, outputs: Vec<PathBuf>) -> std::io::Result<()> {
        let done = RunCompletion {
            finished_at: chrono::Utc::now().to_rfc3339(),
            exit_code,
            error,
            outputs,
        };
        let mut f = OpenOptions::new().write(true).create_new(true).open(self.result_path())?;
        f.write_all(serde_json::to_string_pretty(&done).expect("completion serializes").as_bytes())?;
        f.write_all(b"\n")
    }
}
