//! Per-update metrics rows and their CSV form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "mean_reward",
    "policy_entropy",
    "grad_norm",
    "pos_ratio",
    "c_low",
    "c_high",
    "clip_fraction_pos",
    "clip_fraction_neg",
    "mean_is_ratio_deviation",
    "bound_search",
];

/// One row per `(step, epoch)` update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean reward over every sampled response of the step's batch.
    pub mean_reward: f64,
    /// Token-weighted mean of per-state entropies over the batch, before the update.
    pub policy_entropy: f64,
    /// L2 norm over touched logits.
    pub grad_norm: f64,
    pub pos_ratio: f64,
    pub c_low: f64,
    pub c_high: f64,
    pub clip_fraction_pos: f64,
    pub clip_fraction_neg: f64,
    /// Mean `|r - 1|` over the batch, before the update.
    pub mean_is_ratio_deviation: f64,
    /// `fixed`, `target_met` or `range_exhausted`.
    pub bound_search: String,
}

impl MetricsRow {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.mean_reward,
            self.policy_entropy,
            self.grad_norm,
            self.pos_ratio,
            self.c_low,
            self.c_high,
            self.clip_fraction_pos,
            self.clip_fraction_neg,
            self.mean_is_ratio_deviation,
            self.bound_search
        )
    }

    /// Numeric value of a column, by name. `bound_search` has none.
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "step" => self.step as f64,
            "epoch" => self.epoch as f64,
            "mean_reward" => self.mean_reward,
            "policy_entropy" => self.policy_entropy,
            "grad_norm" => self.grad_norm,
            "pos_ratio" => self.pos_ratio,
            "c_low" => self.c_low,
            "c_high" => self.c_high,
            "clip_fraction_pos" => self.clip_fraction_pos,
            "clip_fraction_neg" => self.clip_fraction_neg,
            "mean_is_ratio_deviation" => self.mean_is_ratio_deviation,
            _ => return None,
        })
    }
}

pub fn write_csv(rows: &[MetricsRow]) -> String {
    let mut out = MetricsRow::csv_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("column {name}: cannot parse {field:?}"),
    })
}

/// Parses a metrics CSV. Line numbers in errors are 1-based.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != MetricsRow::csv_header() {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(Error::Parse {
                line: n,
                reason: format!("expected {} fields, found {}", CSV_COLUMNS.len(), f.len()),
            });
        }
        let c = &CSV_COLUMNS;
        rows.push(MetricsRow {
            step: parse_field(f[0], c[0], n)?,
            epoch: parse_field(f[1], c[1], n)?,
            mean_reward: parse_field(f[2], c[2], n)?,
            policy_entropy: parse_field(f[3], c[3], n)?,
            grad_norm: parse_field(f[4], c[4], n)?,
            pos_ratio: parse_field(f[5], c[5], n)?,
            c_low: parse_field(f[6], c[6], n)?,
            c_high: parse_field(f[7], c[7], n)?,
            clip_fraction_pos: parse_field(f[8], c[8], n)?,
            clip_fraction_neg: parse_field(f[9], c[9], n)?,
            mean_is_ratio_deviation: parse_field(f[10], c[10], n)?,
            bound_search: f[11].to_string(),
        });
    }
    Ok(rows)
}
