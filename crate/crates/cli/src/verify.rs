//! The `verify` command: runs the theory suite and tabulates verdicts.

use std::path::{Path, PathBuf};

use bapo_core::theory::{errors_csv, run_suite, CheckReport, Fault, Tolerances, VerifyOptions};

use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_dir, write_file};

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub reports: Vec<CheckReport>,
    pub errors_path: PathBuf,
}

impl VerifyOutcome {
    pub fn failed(&self) -> Vec<&CheckReport> {
        self.reports.iter().filter(|r| !r.passed).collect()
    }
}

pub fn render_table(reports: &[CheckReport]) -> String {
    let mut out = format!(
        "{:<14} {:>7} {:>12}  {:<6} {}\n",
        "check", "trials", "worst", "result", "limit"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<14} {:>7} {:>12.3e}  {:<6} {}; {}\n",
            r.name,
            r.trials,
            r.worst,
            if r.passed { "pass" } else { "FAIL" },
            r.limit,
            r.detail
        ));
    }
    out
}

/// Runs the suite and writes `verify_errors.csv` into `out_dir`.
pub fn run_verify(
    profile: &str,
    trials: Option<usize>,
    seed: Option<u64>,
    fault: Option<Fault>,
    out_dir: &Path,
) -> CliResult<VerifyOutcome> {
    let tolerances = Tolerances::profile(profile).map_err(|e| CliError::Usage(e.to_string()))?;
    if trials == Some(0) {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let mut opts = VerifyOptions {
        trials,
        tolerances,
        fault,
        ..VerifyOptions::default()
    };
    if let Some(seed) = seed {
        opts.seed = seed;
    }
    let reports = run_suite(&opts)?;
    ensure_dir(out_dir)?;
    let errors_path = out_dir.join("verify_errors.csv");
    write_file(&errors_path, &errors_csv(&reports))?;
    Ok(VerifyOutcome { reports, errors_path })
}

/// Prints the table and turns failing checks into an error.
pub fn cmd_verify(
    profile: &str,
    trials: Option<usize>,
    seed: Option<u64>,
    fault: Option<Fault>,
    out_dir: &Path,
) -> CliResult<VerifyOutcome> {
    let outcome = run_verify(profile, trials, seed, fault, out_dir)?;
    print!("{}", render_table(&outcome.reports));
    println!("per-trial errors: {}", outcome.errors_path.display());
    let failed = outcome.failed();
    if failed.is_empty() {
        return Ok(outcome);
    }
    let list: Vec<String> = failed
        .iter()
        .map(|r| format!("{} (worst {:e})", r.name, r.worst))
        .collect();
    Err(CliError::Failed(format!("failed checks: {}", list.join(", "))))
}
