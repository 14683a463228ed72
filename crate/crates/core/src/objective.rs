//! Clipped surrogate objective on tabular policies.
//!
//! Per token the objective is `min(r A, clip(r, c_low, c_high) A)`. Its
//! gradient with respect to the logits of the token's state is
//! `X * A * r * (e_token - pi)`, where `X` is the clip indicator: 1 when the
//! unclipped branch is active (`A > 0 && r < c_high` or `A < 0 && r > c_low`).
//! Tokens with `A == 0` are skipped everywhere, including the token count used
//! by the `token_mean` aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{GradientTable, PolicyTable, StateId};
use crate::rollout::RolloutBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct ClipBounds {
    c_low: f64,
    c_high: f64,
}

impl ClipBounds {
    /// Requires `0 <= c_low < 1 < c_high`.
    pub fn new(c_low: f64, c_high: f64) -> Result<Self> {
        if !(c_low.is_finite() && c_high.is_finite() && (0.0..1.0).contains(&c_low) && 1.0 < c_high) {
            return Err(invalid(
                "clip bounds",
                format!("need 0 <= c_low < 1 < c_high, got ({c_low}, {c_high})"),
            ));
        }
        Ok(Self { c_low, c_high })
    }

    /// Textbook PPO bounds `(1 - eps, 1 + eps)`.
    pub fn symmetric(eps: f64) -> Result<Self> {
        Self::new(1.0 - eps, 1.0 + eps)
    }

    pub fn c_low(&self) -> f64 {
        self.c_low
    }

    pub fn c_high(&self) -> f64 {
        self.c_high
    }
}

impl TryFrom<(f64, f64)> for ClipBounds {
    type Error = Error;

    fn try_from((lo, hi): (f64, f64)) -> Result<Self> {
        Self::new(lo, hi)
    }
}

impl From<ClipBounds> for (f64, f64) {
    fn from(b: ClipBounds) -> Self {
        (b.c_low, b.c_high)
    }
}

/// Weight of each token inside the two sums of the contribution ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioWeighting {
    /// Each term weighted by the behavior probability of its token.
    #[default]
    ProbWeighted,
    /// Plain token sums.
    Plain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAgg {
    /// Objective divided by the number of nonzero-advantage tokens.
    #[default]
    TokenMean,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub ratio_weighting: RatioWeighting,
    pub loss_agg: LossAgg,
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid(
            "importance ratio",
            format!("must be positive and finite, got {r}"),
        ));
    }
    Ok(())
}

/// `min(r A, clip(r, c_low, c_high) A)`.
pub fn surrogate_term(r: f64, advantage: f64, bounds: ClipBounds) -> Result<f64> {
    check_ratio(r)?;
    let clipped = r.clamp(bounds.c_low, bounds.c_high);
    Ok((r * advantage).min(clipped * advantage))
}

/// Whether the token's gradient survives clipping. Zero advantages carry no
/// gradient and report `false`.
pub fn clip_indicator(r: f64, advantage: f64, bounds: ClipBounds) -> bool {
    (advantage > 0.0 && r < bounds.c_high) || (advantage < 0.0 && r > bounds.c_low)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Aggregated objective over positive-advantage tokens.
    pub positive_sum: f64,
    /// Aggregated objective over negative-advantage tokens.
    pub negative_sum: f64,
    pub total: f64,
    /// Positive contribution ratio at the same bounds.
    pub pos_ratio: f64,
    pub clip_fraction_pos: f64,
    pub clip_fraction_neg: f64,
    pub positive_tokens: usize,
    pub negative_tokens: usize,
    /// Records skipped because their advantage is exactly zero.
    pub zero_advantage_tokens: usize,
}

/// Current-policy importance ratio of every record, in record order.
pub fn importance_ratios(policy: &PolicyTable, batch: &RolloutBatch) -> Result<Vec<f64>> {
    let mut cache: BTreeMap<&StateId, Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(batch.records.len());
    for (index, rec) in batch.records.iter().enumerate() {
        if !cache.contains_key(&rec.state) {
            cache.insert(&rec.state, policy.log_probs(&rec.state)?);
        }
        let lps = &cache[&rec.state];
        let lp = *lps.get(rec.token).ok_or(Error::TokenOutOfRange {
            token: rec.token,
            vocab_size: policy.vocab_size(),
        })?;
        let r = (lp - rec.behavior_log_prob).exp();
        if !(r > 0.0 && r.is_finite()) || !rec.behavior_log_prob.is_finite() {
            return Err(Error::NonFiniteRatio {
                index,
                state: rec.state.clone(),
                token: rec.token,
            });
        }
        out.push(r);
    }
    Ok(out)
}

/// Frozen per-token `(r, A, weight)` triples, for evaluating the contribution
/// ratio at many candidate bounds without touching the policy again.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioProbe {
    terms: Vec<(f64, f64, f64)>,
}

impl RatioProbe {
    pub fn new(policy: &PolicyTable, batch: &RolloutBatch, weighting: RatioWeighting) -> Result<Self> {
        let ratios = importance_ratios(policy, batch)?;
        let terms = batch
            .records
            .iter()
            .zip(ratios)
            .filter(|(rec, _)| rec.advantage != 0.0)
            .map(|(rec, r)| {
                let w = match weighting {
                    RatioWeighting::ProbWeighted => rec.behavior_log_prob.exp(),
                    RatioWeighting::Plain => 1.0,
                };
                (r, rec.advantage, w)
            })
            .collect();
        Ok(Self { terms })
    }

    /// From explicit `(r, A, weight)` triples.
    pub fn from_terms(terms: Vec<(f64, f64, f64)>) -> Result<Self> {
        for &(r, _, w) in &terms {
            check_ratio(r)?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid("ratio weight", format!("must be finite and >= 0, got {w}")));
            }
        }
        Ok(Self { terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Numerator and denominator sums before taking magnitudes: positives
    /// clipped to `(0, c_high]`, and every token clipped to `(c_low, c_high)`.
    pub fn sums(&self, bounds: ClipBounds) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(r, a, w) in &self.terms {
            let full = (r * a).min(r.clamp(bounds.c_low, bounds.c_high) * a);
            den += w * full;
            if a > 0.0 {
                num += w * (r * a).min(r.clamp(0.0, bounds.c_high) * a);
            }
        }
        (num, den)
    }

    /// `|num| / |den|`; 1 when both vanish, `+inf` when only `den` does.
    pub fn ratio(&self, bounds: ClipBounds) -> f64 {
        let (num, den) = self.sums(bounds);
        match (num == 0.0, den == 0.0) {
            (true, true) => 1.0,
            (false, true) => f64::INFINITY,
            _ => num.abs() / den.abs(),
        }
    }
}

/// Positive contribution ratio of `batch` under `policy` at `bounds`.
pub fn contribution_ratio(
    batch: &RolloutBatch,
    policy: &PolicyTable,
    bounds: ClipBounds,
    weighting: RatioWeighting,
) -> Result<f64> {
    Ok(RatioProbe::new(policy, batch, weighting)?.ratio(bounds))
}

pub(crate) fn aggregation_weight(batch: &RolloutBatch, agg: LossAgg) -> f64 {
    match agg {
        LossAgg::Sum => 1.0,
        LossAgg::TokenMean => {
            let n = batch.records.iter().filter(|r| r.advantage != 0.0).count();
            if n == 0 {
                0.0
            } else {
                1.0 / n as f64
            }
        }
    }
}

/// Aggregated surrogate objective `J` (to be maximized).
pub fn objective_value(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    let w = aggregation_weight(batch, cfg.loss_agg);
    let ratios = importance_ratios(policy, batch)?;
    let mut total = 0.0;
    for (rec, r) in batch.records.iter().zip(ratios) {
        if rec.advantage != 0.0 {
            total += w * surrogate_term(r, rec.advantage, bounds)?;
        }
    }
    Ok(total)
}

/// Analytic gradient of [`objective_value`] with respect to every touched
/// logit, plus the positive/negative breakdown.
pub fn batch_gradient(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    cfg: &ObjectiveConfig,
) -> Result<(GradientTable, LossBreakdown)> {
    let w = aggregation_weight(batch, cfg.loss_agg);
    let ratios = importance_ratios(policy, batch)?;
    let mut probs: BTreeMap<&StateId, Vec<f64>> = BTreeMap::new();
    let mut grad = GradientTable::new(policy.vocab_size());
    let mut b = LossBreakdown::default();
    let (mut clipped_pos, mut clipped_neg) = (0usize, 0usize);

    for (rec, &r) in batch.records.iter().zip(&ratios) {
        let a = rec.advantage;
        if a == 0.0 {
            b.zero_advantage_tokens += 1;
            continue;
        }
        let value = w * surrogate_term(r, a, bounds)?;
        let kept = clip_indicator(r, a, bounds);
        if a > 0.0 {
            b.positive_sum += value;
            b.positive_tokens += 1;
            clipped_pos += usize::from(!kept);
        } else {
            b.negative_sum += value;
            b.negative_tokens += 1;
            clipped_neg += usize::from(!kept);
        }
        if !kept {
            continue;
        }
        if !probs.contains_key(&rec.state) {
            probs.insert(&rec.state, policy.probs(&rec.state)?);
        }
        let pi = &probs[&rec.state];
        let scale = w * a * r;
        let row = grad.row_mut(&rec.state);
        for (g, p) in row.iter_mut().zip(pi) {
            *g -= scale * p;
        }
        row[rec.token] += scale;
    }

    b.total = b.positive_sum + b.negative_sum;
    b.clip_fraction_pos = fraction(clipped_pos, b.positive_tokens);
    b.clip_fraction_neg = fraction(clipped_neg, b.negative_tokens);
    b.pos_ratio = RatioProbe::new(policy, batch, cfg.ratio_weighting)?.ratio(bounds);
    Ok((grad, b))
}

fn fraction(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}
