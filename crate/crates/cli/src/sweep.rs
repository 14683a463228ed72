//! The `sweep` command: one base config, one axis, many seeds.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bapo_core::trainer::median;
use bapo_core::{Algorithm, ExperimentConfig, MetricsRow};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_dir, write_file};
use crate::train::run_to_dir;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Staleness,
    Algorithm,
    ClipBounds,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Staleness => "staleness",
            Axis::Algorithm => "algorithm",
            Axis::ClipBounds => "clip_bounds",
        }
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "staleness" => Ok(Axis::Staleness),
            "algorithm" => Ok(Axis::Algorithm),
            "clip_bounds" => Ok(Axis::ClipBounds),
            other => Err(CliError::Usage(format!(
                "unknown axis {other:?}; expected staleness, algorithm or clip_bounds"
            ))),
        }
    }
}

/// One point on the sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisValue {
    Staleness(usize),
    Algorithm(Algorithm),
    /// `c_low:c_high`.
    ClipBounds(f64, f64),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Staleness(e) => write!(f, "{e}"),
            AxisValue::Algorithm(a) => f.write_str(a.as_str()),
            AxisValue::ClipBounds(lo, hi) => write!(f, "{lo}:{hi}"),
        }
    }
}

impl AxisValue {
    pub fn parse(axis: Axis, text: &str) -> CliResult<Self> {
        let bad = |why: String| CliError::Usage(format!("bad {} value {text:?}: {why}", axis.as_str()));
        let text = text.trim();
        match axis {
            Axis::Staleness => text.parse().map(AxisValue::Staleness).map_err(|e| bad(format!("{e}"))),
            Axis::Algorithm => text
                .parse()
                .map(AxisValue::Algorithm)
                .map_err(|e: bapo_core::Error| bad(e.to_string())),
            Axis::ClipBounds => {
                let (lo, hi) = text
                    .split_once(':')
                    .ok_or_else(|| bad("expected c_low:c_high".into()))?;
                let lo: f64 = lo.parse().map_err(|e| bad(format!("{e}")))?;
                let hi: f64 = hi.parse().map_err(|e| bad(format!("{e}")))?;
                Ok(AxisValue::ClipBounds(lo, hi))
            }
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        match *self {
            AxisValue::Staleness(e) => cfg.trainer.staleness_epochs = e,
            AxisValue::Algorithm(a) => cfg.trainer.algorithm = a,
            AxisValue::ClipBounds(lo, hi) => cfg.trainer.fixed_bounds = Some((lo, hi)),
        }
    }

    fn file_label(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

/// Parses a comma-separated seed list. An empty list is a usage error.
pub fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| CliError::Usage(format!("bad seed {s:?}: {e}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("the seed list is empty".into()));
    }
    Ok(seeds)
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub value: AxisValue,
    pub seed: u64,
    pub outcome: Result<CellSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub run_id: String,
    pub csv_path: PathBuf,
    pub rows: usize,
    pub terminal_entropy: f64,
    pub terminal_reward: f64,
    /// Trapezoid area under the per-row entropy curve.
    pub entropy_auc: f64,
}

impl CellSummary {
    fn from_rows(run_id: String, csv_path: PathBuf, rows: &[MetricsRow]) -> Self {
        let last = rows.last();
        Self {
            run_id,
            csv_path,
            rows: rows.len(),
            terminal_entropy: last.map_or(f64::NAN, |r| r.policy_entropy),
            terminal_reward: last.map_or(f64::NAN, |r| r.mean_reward),
            entropy_auc: rows
                .windows(2)
                .map(|w| 0.5 * (w[0].policy_entropy + w[1].policy_entropy))
                .sum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub axis: Axis,
    pub cells: Vec<CellResult>,
    pub summary_path: PathBuf,
}

impl SweepOutcome {
    pub fn failed(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.outcome.is_err()).collect()
    }

    /// Median terminal entropy over the successful seeds of each value, in axis order.
    pub fn median_terminal_entropy(&self) -> Vec<(AxisValue, f64)> {
        let mut out: Vec<(AxisValue, f64)> = Vec::new();
        for cell in &self.cells {
            if out.iter().any(|(v, _)| *v == cell.value) {
                continue;
            }
            let values: Vec<f64> = self
                .cells
                .iter()
                .filter(|c| c.value == cell.value)
                .filter_map(|c| c.outcome.as_ref().ok().map(|s| s.terminal_entropy))
                .collect();
            out.push((
                cell.value.clone(),
                if values.is_empty() { f64::NAN } else { median(&values) },
            ));
        }
        out
    }
}

pub const SUMMARY_HEADER: &str = "axis,value,seed,status,run_id,rows,terminal_entropy,terminal_reward,entropy_auc,csv";

fn summary_csv(axis: Axis, cells: &[CellResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for c in cells {
        match &c.outcome {
            Ok(s) => out.push_str(&format!(
                "{},{},{},ok,{},{},{},{},{},{}\n",
                axis.as_str(),
                c.value,
                c.seed,
                s.run_id,
                s.rows,
                s.terminal_entropy,
                s.terminal_reward,
                s.entropy_auc,
                s.csv_path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
            )),
            Err(e) => out.push_str(&format!(
                "{},{},{},failed,,,,,,\"{}\"\n",
                axis.as_str(),
                c.value,
                c.seed,
                e.replace('"', "'")
            )),
        }
    }
    out
}

/// Runs every `(value, seed)` cell on a pool of `jobs` workers (0 = one per
/// core). Failed cells are recorded and do not stop the sweep.
pub fn run_sweep(
    base: &ExperimentConfig,
    origin: &str,
    axis: Axis,
    values: &[AxisValue],
    seeds: &[u64],
    jobs: usize,
    out_dir: &Path,
) -> CliResult<SweepOutcome> {
    if values.is_empty() {
        return Err(CliError::Usage("the value list is empty".into()));
    }
    if seeds.is_empty() {
        return Err(CliError::Usage("the seed list is empty".into()));
    }
    ensure_dir(out_dir)?;
    let cells: Vec<(AxisValue, u64)> = values
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build a pool of {jobs} workers: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(value, seed)| {
                let mut cfg = base.clone();
                value.apply(&mut cfg);
                cfg.trainer.seed = *seed;
                let stem = format!("{}-{}-seed{seed}", axis.as_str(), value.file_label());
                let outcome = run_to_dir(&cfg, origin, out_dir, Some(&stem))
                    .map(|art| {
                        CellSummary::from_rows(art.manifest.run_id.clone(), art.manifest.csv_path.clone(), &art.rows)
                    })
                    .map_err(|e| e.to_string());
                CellResult {
                    value: value.clone(),
                    seed: *seed,
                    outcome,
                }
            })
            .collect()
    });
    let summary_path = out_dir.join("summary.csv");
    write_file(&summary_path, &summary_csv(axis, &results))?;
    Ok(SweepOutcome {
        axis,
        cells: results,
        summary_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsing() {
        assert_eq!(AxisValue::parse(Axis::Staleness, "4").unwrap(), AxisValue::Staleness(4));
        assert_eq!(
            AxisValue::parse(Axis::Algorithm, "bapo").unwrap(),
            AxisValue::Algorithm(Algorithm::Bapo)
        );
        assert_eq!(
            AxisValue::parse(Axis::ClipBounds, "0.8:1.28").unwrap(),
            AxisValue::ClipBounds(0.8, 1.28)
        );
        assert!(AxisValue::parse(Axis::ClipBounds, "0.8").is_err());
        assert!(AxisValue::parse(Axis::Staleness, "-1").is_err());
        assert!("bogus".parse::<Axis>().is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("").unwrap_err().exit_code(), 2);
        assert!(parse_seeds("1,x").is_err());
    }

    #[test]
    fn failed_cells_do_not_stop_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::default();
        base.trainer.steps = 2;
        let values = [AxisValue::ClipBounds(0.8, 1.2), AxisValue::ClipBounds(1.1, 1.2)];
        let out = run_sweep(&base, "inline", Axis::ClipBounds, &values, &[1, 2], 2, dir.path()).unwrap();
        assert_eq!(out.cells.len(), 4);
        assert_eq!(out.failed().len(), 2);
        let summary = std::fs::read_to_string(&out.summary_path).unwrap();
        assert_eq!(summary.lines().count(), 5);
        assert!(summary.contains("failed"));
        assert!(dir.path().join("clip_bounds-0.8_1.2-seed2.csv").exists());
    }
}
