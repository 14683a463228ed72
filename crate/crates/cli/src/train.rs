//! The `train` command: one run, one CSV, one manifest.

use std::path::{Path, PathBuf};

use bapo_core::metrics::write_csv;
use bapo_core::{trainer, ExperimentConfig, MetricsRow};

use crate::config_file;
use crate::error::CliResult;
use crate::manifest::{allocate_run_id, ensure_dir, timestamp, write_file, RunManifest};

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
}

impl RunArtifacts {
    pub fn csv_path(&self) -> &Path {
        &self.manifest.csv_path
    }
}

/// Resolves `cfg`, runs it, and writes `<run_id>.csv` and `<run_id>.manifest`
/// into `out_dir`. The run id is `stem`, or `<algorithm>-<digest prefix>`.
pub fn run_to_dir(cfg: &ExperimentConfig, origin: &str, out_dir: &Path, stem: Option<&str>) -> CliResult<RunArtifacts> {
    let (resolved, trainer_cfg) = config_file::resolve(cfg, origin)?;
    let digest = config_file::digest(&resolved);
    ensure_dir(out_dir)?;
    let stem = stem
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-{}", trainer_cfg.algorithm.as_str(), &digest[..12]));
    let run_id = allocate_run_id(out_dir, &stem)?;
    let csv_path: PathBuf = out_dir.join(format!("{run_id}.csv"));
    let manifest_path: PathBuf = out_dir.join(format!("{run_id}.manifest"));

    let started_at = timestamp();
    let outcome = trainer::run(&trainer_cfg);
    let finished_at = timestamp();
    let rows = match outcome {
        Ok(out) => out.rows,
        Err(e) => {
            let _ = std::fs::remove_file(&manifest_path);
            return Err(e.into());
        }
    };
    write_file(&csv_path, &write_csv(&rows))?;
    let manifest = RunManifest {
        run_id,
        config_digest: digest,
        csv_path,
        manifest_path: manifest_path.clone(),
        started_at,
        finished_at,
        rows: rows.len(),
        staleness_epochs: trainer_cfg.staleness_epochs,
        updates_per_batch: trainer_cfg.staleness_epochs + 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: resolved,
    };
    write_file(&manifest_path, &manifest.to_toml())?;
    Ok(RunArtifacts { manifest, rows })
}

pub fn cmd_train(config_path: Option<&Path>, out_dir: &Path) -> CliResult<RunArtifacts> {
    let cfg = config_file::load(config_path)?;
    let origin = config_path
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<defaults>".to_string());
    run_to_dir(&cfg, &origin, out_dir, None)
}
