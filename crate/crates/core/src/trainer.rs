//! The training loop: sample grouped responses, compute advantages, then
//! update once per staleness epoch with fixed or adaptive clipping bounds.
//!
//! Randomness is expanded from the run seed as domain, then step (or group),
//! then prompt slot, then group member, then token position. Prompt choice
//! uses domain 0, replay sampling domain 1, and partial rollout domain 2.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bapo::{bapo_update, fixed_update, BapoConfig, UpdateOutcome};
use crate::env::EnvSpec;
use crate::error::{invalid, Error, Result};
use crate::metrics::MetricsRow;
use crate::objective::{ClipBounds, ObjectiveConfig};
use crate::policy::{ParameterSharing, PolicyTable};
use crate::rng::SeedStream;
use crate::rollout::{generate_groups, GroupInput, PartialRolloutBuffer, RolloutBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Symmetric fixed bounds.
    GrpoFixed,
    /// Fixed bounds with a raised `c_high`.
    ClipHigher,
    /// Any other fixed asymmetric pair.
    Asymmetric,
    /// Adaptive bounds.
    Bapo,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::GrpoFixed => "grpo_fixed",
            Algorithm::ClipHigher => "clip_higher",
            Algorithm::Asymmetric => "asymmetric",
            Algorithm::Bapo => "bapo",
        }
    }

    /// Bounds used when none are configured.
    pub fn default_bounds(&self) -> Option<(f64, f64)> {
        match self {
            Algorithm::GrpoFixed => Some((0.8, 1.2)),
            Algorithm::ClipHigher => Some((0.8, 1.28)),
            Algorithm::Asymmetric | Algorithm::Bapo => None,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo_fixed" => Ok(Algorithm::GrpoFixed),
            "clip_higher" => Ok(Algorithm::ClipHigher),
            "asymmetric" => Ok(Algorithm::Asymmetric),
            "bapo" => Ok(Algorithm::Bapo),
            other => Err(invalid("algorithm", format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Where off-policy staleness comes from besides epoch replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RolloutMode {
    /// Each step samples fresh complete groups from the current snapshot.
    Replay,
    /// Each step starts `prompts_per_batch` new groups and grows every
    /// unfinished trajectory by `token_budget` tokens under the current
    /// policy. Groups enter a batch once all members are complete.
    Partial { token_budget: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub learning_rate: f64,
    pub staleness_epochs: usize,
    pub env: EnvSpec,
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub seed: u64,
    pub bapo: BapoConfig,
    pub fixed_bounds: ClipBounds,
    pub objective: ObjectiveConfig,
    pub rollout: RolloutMode,
    pub std_normalize: bool,
    pub sharing: ParameterSharing,
    pub recenter_logits: bool,
}

impl TrainerConfig {
    /// Defaults for every knob except the environment.
    pub fn new(algorithm: Algorithm, env: EnvSpec) -> Self {
        let fixed = algorithm.default_bounds().unwrap_or((0.8, 1.2));
        Self {
            algorithm,
            steps: 100,
            learning_rate: 0.05,
            staleness_epochs: 0,
            prompts_per_batch: env.num_prompts(),
            env,
            group_size: 8,
            seed: 0,
            bapo: BapoConfig::default(),
            fixed_bounds: ClipBounds::new(fixed.0, fixed.1).expect("valid defaults"),
            objective: ObjectiveConfig::default(),
            rollout: RolloutMode::Replay,
            std_normalize: true,
            sharing: ParameterSharing::default(),
            recenter_logits: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.group_size < 2 {
            return Err(invalid("group_size", format!("must be >= 2, got {}", self.group_size)));
        }
        if self.prompts_per_batch == 0 || self.prompts_per_batch > self.env.num_prompts() {
            return Err(invalid(
                "prompts_per_batch",
                format!(
                    "must lie in 1..={}, got {}",
                    self.env.num_prompts(),
                    self.prompts_per_batch
                ),
            ));
        }
        if let RolloutMode::Partial { token_budget: 0 } = self.rollout {
            return Err(invalid("token_budget", "must be >= 1"));
        }
        self.bapo.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub policy: PolicyTable,
}

fn choose_prompts(stream: &SeedStream, step: usize, num_prompts: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..num_prompts).collect();
    if k < num_prompts {
        all.shuffle(&mut stream.child(step as u64).rng());
        all.truncate(k);
    }
    all
}

struct Sampler {
    root: SeedStream,
    buffer: Option<PartialRolloutBuffer>,
    next_group: usize,
}

impl Sampler {
    fn new(cfg: &TrainerConfig) -> Result<Self> {
        let buffer = match cfg.rollout {
            RolloutMode::Replay => None,
            RolloutMode::Partial { token_budget } => Some(PartialRolloutBuffer::new(token_budget, cfg.group_size)?),
        };
        Ok(Self {
            root: SeedStream::new(cfg.seed),
            buffer,
            next_group: 0,
        })
    }

    fn sample(&mut self, cfg: &TrainerConfig, policy: &PolicyTable, step: usize) -> Result<Vec<GroupInput>> {
        let n = cfg.env.num_prompts();
        match &mut self.buffer {
            None => {
                let prompts = choose_prompts(&self.root.child(0), step, n, cfg.prompts_per_batch);
                let first = step * cfg.prompts_per_batch;
                generate_groups(
                    policy,
                    &cfg.env,
                    &prompts,
                    cfg.group_size,
                    &self.root.child(1).child(step as u64),
                    first,
                )
            }
            Some(buffer) => {
                for _ in 0..cfg.prompts_per_batch {
                    let id = self.next_group;
                    self.next_group += 1;
                    let prompt = self.root.child(0).child(id as u64).rng().gen_range(0..n);
                    buffer.enqueue_group(id, prompt, &self.root.child(2).child(id as u64))?;
                }
                buffer.step(policy, &cfg.env)?;
                Ok(buffer.take_ready_groups())
            }
        }
    }
}

fn batch_entropy(policy: &PolicyTable, batch: &RolloutBatch) -> Result<f64> {
    if batch.records.is_empty() {
        return Ok(0.0);
    }
    let mut cache = std::collections::BTreeMap::new();
    let mut total = 0.0;
    for r in &batch.records {
        let h = match cache.get(&r.state) {
            Some(h) => *h,
            None => {
                let h = policy.state_entropy(&r.state)?;
                cache.insert(&r.state, h);
                h
            }
        };
        total += h;
    }
    Ok(total / batch.records.len() as f64)
}

fn update(cfg: &TrainerConfig, policy: &mut PolicyTable, batch: &RolloutBatch) -> Result<UpdateOutcome> {
    match cfg.algorithm {
        Algorithm::Bapo => bapo_update(policy, batch, &cfg.bapo, &cfg.objective, cfg.learning_rate),
        _ => fixed_update(policy, batch, cfg.fixed_bounds, &cfg.objective, cfg.learning_rate),
    }
}

/// Trains from a uniform policy and returns one row per update.
pub fn run(cfg: &TrainerConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut policy = PolicyTable::new(cfg.env.vocab_size())?.with_sharing(cfg.sharing);
    let mut sampler = Sampler::new(cfg)?;
    let mut rows = Vec::with_capacity(cfg.steps * (cfg.staleness_epochs + 1));
    let at = |step, epoch| {
        move |e: Error| Error::AtStep {
            step,
            epoch,
            source: Box::new(e),
        }
    };

    for step in 0..cfg.steps {
        let groups = sampler.sample(cfg, &policy, step).map_err(at(step, 0))?;
        if groups.is_empty() {
            continue;
        }
        let mut batch = RolloutBatch::from_groups(groups, cfg.group_size, cfg.staleness_epochs, cfg.std_normalize)
            .map_err(at(step, 0))?;
        let states: Vec<_> = batch.states().cloned().collect();
        for s in &states {
            policy.materialize(s);
        }
        let mean_reward = batch.mean_reward();
        for epoch in 0..=cfg.staleness_epochs {
            batch.replay_epoch = epoch;
            let ctx = at(step, epoch);
            let policy_entropy = batch_entropy(&policy, &batch).map_err(ctx)?;
            let deviation = batch.mean_abs_ratio_deviation(&policy).map_err(ctx)?;
            let out = update(cfg, &mut policy, &batch).map_err(ctx)?;
            if cfg.recenter_logits {
                policy.recenter();
            }
            rows.push(MetricsRow {
                step,
                epoch,
                mean_reward,
                policy_entropy,
                grad_norm: out.grad_norm,
                pos_ratio: out.breakdown.pos_ratio,
                c_low: out.bounds.c_low(),
                c_high: out.bounds.c_high(),
                clip_fraction_pos: out.breakdown.clip_fraction_pos,
                clip_fraction_neg: out.breakdown.clip_fraction_neg,
                mean_is_ratio_deviation: deviation,
                bound_search: out.trace.map_or("fixed", |t| t.terminal.as_str()).to_string(),
            });
        }
    }
    Ok(RunOutput { rows, policy })
}

/// Median of a nonempty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonEntry {
    pub label: String,
    /// Median over seeds at each row index, truncated to the shortest run.
    pub entropy_curve: Vec<f64>,
    pub reward_curve: Vec<f64>,
    pub terminal_entropy: f64,
    pub terminal_reward: f64,
    /// Trapezoid area under the median entropy curve, in rows.
    pub entropy_auc: f64,
    pub runs: Vec<Vec<MetricsRow>>,
}

/// Runs every labelled configuration under every seed (overriding the
/// configured seed) and summarizes medians over seeds.
pub fn run_comparison(configs: &[(String, TrainerConfig)], seeds: &[u64]) -> Result<Vec<ComparisonEntry>> {
    let Some((_, first)) = configs.first() else {
        return Err(invalid("comparison", "needs at least one configuration"));
    };
    if seeds.is_empty() {
        return Err(invalid("seeds", "needs at least one seed"));
    }
    if let Some((label, _)) = configs.iter().find(|(_, c)| c.env != first.env) {
        return Err(invalid(
            "comparison",
            format!("configuration {label:?} uses a different environment"),
        ));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outputs: Vec<Vec<MetricsRow>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = TrainerConfig {
                seed,
                ..configs[c].1.clone()
            };
            run(&cfg).map(|o| o.rows)
        })
        .collect::<Result<_>>()?;
    let mut outputs = outputs.into_iter();
    let mut entries = Vec::with_capacity(configs.len());
    for (label, _) in configs {
        let runs: Vec<Vec<MetricsRow>> = outputs.by_ref().take(seeds.len()).collect();
        let len = runs.iter().map(Vec::len).min().unwrap_or(0);
        let curve = |f: fn(&MetricsRow) -> f64| -> Vec<f64> {
            (0..len)
                .map(|i| median(&runs.iter().map(|r| f(&r[i])).collect::<Vec<_>>()))
                .collect()
        };
        let entropy_curve = curve(|r| r.policy_entropy);
        let reward_curve = curve(|r| r.mean_reward);
        let entropy_auc = entropy_curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
        entries.push(ComparisonEntry {
            label: label.clone(),
            terminal_entropy: entropy_curve.last().copied().unwrap_or(f64::NAN),
            terminal_reward: reward_curve.last().copied().unwrap_or(f64::NAN),
            entropy_curve,
            reward_curve,
            entropy_auc,
            runs,
        });
    }
    Ok(entries)
}
