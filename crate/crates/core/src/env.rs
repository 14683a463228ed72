//! Synthetic fixed-horizon token tasks with binary terminal rewards.
//!
//! `Parity` rewards a response whose token sum hits a per-prompt residue
//! modulo the vocabulary size (success ~ 1/V under a uniform policy).
//! `ExactMatch` rewards only one target sequence per prompt (success V^-T),
//! which makes negative-advantage tokens dominate early training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{softmax, PolicyTable, StateId, Token};
use crate::rng::SeedStream;

/// Largest number of sequences the enumeration oracles will visit.
pub const ENUMERATION_BOUND: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Parity,
    ExactMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Residue(usize),
    Sequence(Vec<Token>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    num_prompts: usize,
    vocab_size: usize,
    horizon: usize,
    reward_mode: RewardMode,
    targets: Vec<Target>,
}

impl EnvSpec {
    pub fn new(vocab_size: usize, horizon: usize, reward_mode: RewardMode, targets: Vec<Target>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid("vocab_size", format!("must be >= 2, got {vocab_size}")));
        }
        if horizon < 1 {
            return Err(invalid("horizon", "must be >= 1"));
        }
        if targets.is_empty() {
            return Err(invalid("num_prompts", "must be positive"));
        }
        for (p, t) in targets.iter().enumerate() {
            match (reward_mode, t) {
                (RewardMode::Parity, Target::Residue(r)) if *r < vocab_size => {}
                (RewardMode::ExactMatch, Target::Sequence(s))
                    if s.len() == horizon && s.iter().all(|&y| y < vocab_size) => {}
                _ => {
                    return Err(invalid(
                        "targets",
                        format!("target of prompt {p} does not fit {reward_mode:?} with V={vocab_size}, T={horizon}"),
                    ))
                }
            }
        }
        Ok(Self {
            num_prompts: targets.len(),
            vocab_size,
            horizon,
            reward_mode,
            targets,
        })
    }

    /// Draws per-prompt targets from `seed`.
    pub fn generate(
        num_prompts: usize,
        vocab_size: usize,
        horizon: usize,
        reward_mode: RewardMode,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SeedStream::new(seed).rng();
        let targets = (0..num_prompts)
            .map(|_| match reward_mode {
                RewardMode::Parity => Target::Residue(rng.gen_range(0..vocab_size.max(1))),
                RewardMode::ExactMatch => {
                    Target::Sequence((0..horizon).map(|_| rng.gen_range(0..vocab_size.max(1))).collect())
                }
            })
            .collect();
        Self::new(vocab_size, horizon, reward_mode, targets)
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reward_mode(&self) -> RewardMode {
        self.reward_mode
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// Checks the `StateId` invariants against this environment.
    pub fn check_state(&self, state: &StateId) -> Result<()> {
        if state.prompt_id >= self.num_prompts {
            return Err(invalid("state", format!("prompt {} out of range", state.prompt_id)));
        }
        if state.prefix.len() >= self.horizon {
            return Err(invalid(
                "state",
                format!("prefix length {} >= horizon {}", state.prefix.len(), self.horizon),
            ));
        }
        if let Some(t) = state.prefix.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: *t,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Reward of a full response to `prompt_id`.
    pub fn reward(&self, prompt_id: usize, tokens: &[Token]) -> Result<f64> {
        if tokens.len() != self.horizon {
            return Err(Error::Incomplete {
                len: tokens.len(),
                horizon: self.horizon,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: self.vocab_size,
            });
        }
        let target = self
            .targets
            .get(prompt_id)
            .ok_or_else(|| invalid("prompt_id", format!("{prompt_id} out of range")))?;
        let hit = match target {
            Target::Residue(r) => tokens.iter().sum::<usize>() % self.vocab_size == *r,
            Target::Sequence(s) => s.as_slice() == tokens,
        };
        Ok(if hit { 1.0 } else { 0.0 })
    }

    /// Number of response sequences below a state at `depth`.
    pub fn continuation_count(&self, depth: usize) -> u128 {
        (self.vocab_size as u128).saturating_pow(self.horizon.saturating_sub(depth) as u32)
    }

    pub(crate) fn check_enumerable(&self, depth: usize) -> Result<()> {
        let count = self.continuation_count(depth);
        if count > ENUMERATION_BOUND {
            return Err(Error::EnumerationBound {
                count,
                bound: ENUMERATION_BOUND,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
    /// Present iff the trajectory is complete.
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn new(prompt_id: usize) -> Self {
        Self {
            prompt_id,
            tokens: Vec::new(),
            reward: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.reward.is_some()
    }

    /// State in which the next token is generated.
    pub fn next_state(&self) -> StateId {
        StateId::new(self.prompt_id, self.tokens.clone())
    }
}

pub fn evaluate_reward(spec: &EnvSpec, traj: &Trajectory) -> Result<f64> {
    spec.reward(traj.prompt_id, &traj.tokens)
}

/// Exact probability that `policy` solves `prompt_id`, by enumerating all
/// `V^T` responses. Unvisited states count as uniform.
pub fn success_probability(spec: &EnvSpec, policy: &PolicyTable, prompt_id: usize) -> Result<f64> {
    spec.check_enumerable(0)?;
    if prompt_id >= spec.num_prompts() {
        return Err(invalid("prompt_id", format!("{prompt_id} out of range")));
    }
    let mut tokens = Vec::with_capacity(spec.horizon());
    enumerate(spec, policy, prompt_id, &mut tokens)
}

fn enumerate(spec: &EnvSpec, policy: &PolicyTable, prompt_id: usize, tokens: &mut Vec<Token>) -> Result<f64> {
    if tokens.len() == spec.horizon() {
        return spec.reward(prompt_id, tokens);
    }
    let state = StateId::new(prompt_id, tokens.clone());
    let probs = softmax(policy.logits_or_init(&state));
    let mut total = 0.0;
    for (y, p) in probs.into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        tokens.push(y);
        total += p * enumerate(spec, policy, prompt_id, tokens)?;
        tokens.pop();
    }
    Ok(total)
}
