//! Adaptive clipping: search for bounds whose positive contribution ratio
//! reaches a target, then update at those bounds.
//!
//! The search starts at `(a_minus, a_plus)` and, while the ratio is below
//! `rho0` and `c_low` can still move, raises `c_high` by `delta1` until its
//! range is used up and then raises `c_low` by `delta2`. Candidates are
//! computed as `start + k * step` so the trace length does not depend on
//! accumulated rounding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::objective::{batch_gradient, ClipBounds, LossBreakdown, ObjectiveConfig, RatioProbe, RatioWeighting};
use crate::policy::PolicyTable;
use crate::rollout::RolloutBatch;

/// Slack used when comparing stepped candidates against range ends.
pub const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BapoConfig {
    pub rho0: f64,
    /// `[a_minus, b_minus]`, the movable range of `c_low`.
    pub clip_low_range: (f64, f64),
    /// `[a_plus, b_plus]`, the movable range of `c_high`.
    pub clip_high_range: (f64, f64),
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for BapoConfig {
    fn default() -> Self {
        Self {
            rho0: 0.4,
            clip_low_range: (0.6, 0.9),
            clip_high_range: (1.2, 3.0),
            delta1: 0.05,
            delta2: 0.02,
        }
    }
}

impl BapoConfig {
    /// Fixed bounds expressed as a search with no room to move.
    pub fn degenerate(bounds: ClipBounds, rho0: f64) -> Self {
        Self {
            rho0,
            clip_low_range: (bounds.c_low(), bounds.c_low()),
            clip_high_range: (bounds.c_high(), bounds.c_high()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a_minus, b_minus) = self.clip_low_range;
        let (a_plus, b_plus) = self.clip_high_range;
        let finite = [self.rho0, a_minus, b_minus, a_plus, b_plus, self.delta1, self.delta2]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(invalid("bapo", "all parameters must be finite".to_string()));
        }
        if !(self.rho0 > 0.0 && self.rho0 < 1.0) {
            return Err(invalid("rho0", format!("must lie in (0, 1), got {}", self.rho0)));
        }
        if !(0.0 <= a_minus && a_minus <= b_minus && b_minus < 1.0) {
            return Err(invalid(
                "clip_low_range",
                format!("need 0 <= a_minus <= b_minus < 1, got [{a_minus}, {b_minus}]"),
            ));
        }
        if !(1.0 < a_plus && a_plus <= b_plus) {
            return Err(invalid(
                "clip_high_range",
                format!("need 1 < a_plus <= b_plus, got [{a_plus}, {b_plus}]"),
            ));
        }
        if self.delta1 <= 0.0 {
            return Err(invalid("delta1", format!("must be > 0, got {}", self.delta1)));
        }
        if self.delta2 <= 0.0 {
            return Err(invalid("delta2", format!("must be > 0, got {}", self.delta2)));
        }
        Ok(())
    }

    /// Closed-form cap on the number of visited candidates.
    pub fn max_iterations(&self) -> usize {
        let (a_minus, b_minus) = self.clip_low_range;
        let (a_plus, b_plus) = self.clip_high_range;
        let up = ((b_plus - a_plus) / self.delta1 - STEP_TOLERANCE).ceil().max(0.0) as usize;
        let low = ((b_minus - a_minus) / self.delta2 - STEP_TOLERANCE).ceil().max(0.0) as usize;
        up + low + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchTerminal {
    TargetMet,
    RangeExhausted,
}

impl SearchTerminal {
    pub fn as_str(&self) -> &'static str {
        match self {
            SearchTerminal::TargetMet => "target_met",
            SearchTerminal::RangeExhausted => "range_exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub c_low: f64,
    pub c_high: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSearchTrace {
    pub points: Vec<BoundPoint>,
    pub terminal: SearchTerminal,
}

impl BoundSearchTrace {
    pub fn last(&self) -> BoundPoint {
        *self.points.last().expect("a search visits at least its start")
    }

    /// `step,c_low,c_high,rho` lines, header included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,c_low,c_high,rho\n");
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", p.c_low, p.c_high, p.rho));
        }
        out
    }
}

/// `start + k * step`, snapped onto `end` when within tolerance.
fn stepped(start: f64, k: usize, step: f64, end: f64) -> f64 {
    let v = start + k as f64 * step;
    if (v - end).abs() <= STEP_TOLERANCE {
        end
    } else {
        v
    }
}

fn fits(start: f64, k: usize, step: f64, end: f64) -> bool {
    start + k as f64 * step <= end + STEP_TOLERANCE
}

/// Runs the search against precomputed per-token terms.
pub fn search_bounds(probe: &RatioProbe, cfg: &BapoConfig) -> Result<(ClipBounds, BoundSearchTrace)> {
    cfg.validate()?;
    let (a_minus, b_minus) = cfg.clip_low_range;
    let (a_plus, b_plus) = cfg.clip_high_range;
    let (mut i, mut j) = (0usize, 0usize);
    let mut points = Vec::new();
    loop {
        let bounds = ClipBounds::new(
            stepped(a_minus, j, cfg.delta2, b_minus),
            stepped(a_plus, i, cfg.delta1, b_plus),
        )?;
        let rho = probe.ratio(bounds);
        points.push(BoundPoint {
            c_low: bounds.c_low(),
            c_high: bounds.c_high(),
            rho,
        });
        if rho >= cfg.rho0 {
            return Ok((
                bounds,
                BoundSearchTrace {
                    points,
                    terminal: SearchTerminal::TargetMet,
                },
            ));
        }
        if !fits(a_minus, j + 1, cfg.delta2, b_minus) {
            return Ok((
                bounds,
                BoundSearchTrace {
                    points,
                    terminal: SearchTerminal::RangeExhausted,
                },
            ));
        }
        if fits(a_plus, i + 1, cfg.delta1, b_plus) {
            i += 1;
        } else {
            j += 1;
        }
    }
}

/// Chooses bounds for `batch` under the frozen `policy`.
pub fn adapt_bounds(
    batch: &RolloutBatch,
    policy: &PolicyTable,
    cfg: &BapoConfig,
    weighting: RatioWeighting,
) -> Result<(ClipBounds, BoundSearchTrace)> {
    let probe = RatioProbe::new(policy, batch, weighting)?;
    search_bounds(&probe, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub bounds: ClipBounds,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    /// Present for adaptive updates.
    pub trace: Option<BoundSearchTrace>,
}

/// One gradient-ascent step at fixed bounds.
pub fn fixed_update(
    policy: &mut PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
    learning_rate: f64,
) -> Result<UpdateOutcome> {
    let (grad, breakdown) = batch_gradient(policy, batch, bounds, objective)?;
    policy.apply_gradient(&grad, learning_rate)?;
    Ok(UpdateOutcome {
        bounds,
        breakdown,
        grad_norm: grad.l2_norm(),
        trace: None,
    })
}

/// Bound search followed by one gradient-ascent step at the chosen bounds.
pub fn bapo_update(
    policy: &mut PolicyTable,
    batch: &RolloutBatch,
    cfg: &BapoConfig,
    objective: &ObjectiveConfig,
    learning_rate: f64,
) -> Result<UpdateOutcome> {
    let (bounds, trace) = adapt_bounds(batch, policy, cfg, objective.ratio_weighting)?;
    let mut out = fixed_update(policy, batch, bounds, objective, learning_rate)?;
    out.trace = Some(trace);
    Ok(out)
}
