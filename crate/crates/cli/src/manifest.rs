//! Run manifests and run-id allocation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use bapo_core::ExperimentConfig;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub rows: usize,
    /// Extra epochs per sampled batch.
    pub staleness_epochs: usize,
    /// Updates per sampled batch, `staleness_epochs + 1`.
    pub updates_per_batch: usize,
    pub tool_version: String,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifests always serialize")
    }
}

/// Reserves `<stem>.manifest` (or `<stem>-2.manifest`, ...) in `dir` and
/// returns the run id. The manifest file is created empty so that
/// concurrent callers never receive the same id.
pub fn allocate_run_id(dir: &Path, stem: &str) -> CliResult<String> {
    for n in 1usize.. {
        let id = if n == 1 {
            stem.to_string()
        } else {
            format!("{stem}-{n}")
        };
        if dir.join(format!("{id}.csv")).exists() {
            continue;
        }
        let path = dir.join(format!("{id}.manifest"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => return Ok(id),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(path, e)),
        }
    }
    unreachable!("run ids are unbounded")
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
