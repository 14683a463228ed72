//! Grouped trajectory generation, GRPO advantages, and staleness sources.
//!
//! Behavior quantities (log-probability and policy version) are stamped on
//! each token when it is generated and never touched again. Staleness then
//! comes from two independent places: replaying a batch for several epochs
//! while the policy moves, and partial rollout, where one trajectory is
//! generated in budgeted segments under successive policy versions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, Trajectory};
use crate::error::{invalid, Result};
use crate::policy::{log_softmax, PolicyTable, StateId, Token};
use crate::rng::SeedStream;

/// Numerical floor added to the group standard deviation.
pub const ADVANTAGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub state: StateId,
    pub token: Token,
    pub behavior_log_prob: f64,
    pub behavior_version: u64,
    pub advantage: f64,
    pub group_id: usize,
}

impl TokenRecord {
    /// `pi(token | state) / pi_behavior(token | state)` under `policy`.
    pub fn importance_ratio(&self, policy: &PolicyTable) -> Result<f64> {
        Ok((policy.log_prob(&self.state, self.token)? - self.behavior_log_prob).exp())
    }
}

/// A trajectory together with the behavior quantities of each of its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub behavior_log_probs: Vec<f64>,
    pub behavior_versions: Vec<u64>,
}

impl SampledTrajectory {
    pub fn new(prompt_id: usize) -> Self {
        Self {
            trajectory: Trajectory::new(prompt_id),
            behavior_log_probs: Vec::new(),
            behavior_versions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectory.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.tokens.is_empty()
    }

    pub fn reward(&self) -> Option<f64> {
        self.trajectory.reward
    }

    /// Generates up to `max_tokens` further tokens under `policy`. Token `t`
    /// is drawn from `stream.child(t)`, so the result does not depend on how
    /// generation is split into calls. Evaluates the reward on completion.
    pub fn extend(
        &mut self,
        policy: &PolicyTable,
        spec: &EnvSpec,
        stream: &SeedStream,
        max_tokens: usize,
    ) -> Result<()> {
        let horizon = spec.horizon();
        let mut budget = max_tokens;
        while budget > 0 && self.len() < horizon {
            let position = self.len();
            let state = self.trajectory.next_state();
            let mut rng = stream.child(position as u64).rng();
            let token = policy.sample_token(&state, &mut rng);
            let lp = log_softmax(policy.logits_or_init(&state))[token];
            self.trajectory.tokens.push(token);
            self.behavior_log_probs.push(lp);
            self.behavior_versions.push(policy.version());
            budget -= 1;
        }
        if self.len() == horizon && self.trajectory.reward.is_none() {
            self.trajectory.reward = Some(spec.reward(self.trajectory.prompt_id, &self.trajectory.tokens)?);
        }
        Ok(())
    }
}

/// Samples `group_size` complete responses to `prompt_id` from a frozen
/// snapshot. Member `i` draws from `stream.child(i)`.
pub fn generate_group(
    policy: &PolicyTable,
    spec: &EnvSpec,
    prompt_id: usize,
    group_size: usize,
    stream: &SeedStream,
) -> Result<Vec<SampledTrajectory>> {
    if group_size < 2 {
        return Err(invalid("group_size", format!("must be >= 2, got {group_size}")));
    }
    if prompt_id >= spec.num_prompts() {
        return Err(invalid("prompt_id", format!("{prompt_id} out of range")));
    }
    (0..group_size)
        .map(|i| {
            let mut s = SampledTrajectory::new(prompt_id);
            s.extend(policy, spec, &stream.child(i as u64), spec.horizon())?;
            Ok(s)
        })
        .collect()
}

/// Group-relative advantages. With `std_normalize` the rewards are
/// standardized, `(R - mean) / (std + eps)` with the population standard
/// deviation; otherwise only centred. Zero-variance groups get all zeros.
pub fn grpo_advantages(rewards: &[f64], std_normalize: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid("group", format!("needs >= 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= f64::EPSILON {
        return Ok(vec![0.0; rewards.len()]);
    }
    let scale = if std_normalize { std + ADVANTAGE_EPS } else { 1.0 };
    Ok(rewards.iter().map(|r| (r - mean) / scale).collect())
}

/// The members of one group, as handed to [`RolloutBatch::from_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInput {
    pub group_id: usize,
    pub prompt_id: usize,
    pub members: Vec<SampledTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_id: usize,
    pub prompt_id: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupSummary {
    pub fn zero_variance(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub records: Vec<TokenRecord>,
    pub groups: Vec<GroupSummary>,
    pub group_size: usize,
    pub replay_epoch: usize,
    pub staleness_epochs: usize,
}

impl RolloutBatch {
    /// Computes per-group advantages and broadcasts each sequence advantage to
    /// all of that sequence's tokens.
    pub fn from_groups(
        groups: Vec<GroupInput>,
        group_size: usize,
        staleness_epochs: usize,
        std_normalize: bool,
    ) -> Result<Self> {
        let mut records = Vec::new();
        let mut summaries = Vec::with_capacity(groups.len());
        for g in groups {
            if g.members.len() != group_size {
                return Err(invalid(
                    "group",
                    format!(
                        "group {} has {} members, expected {group_size}",
                        g.group_id,
                        g.members.len()
                    ),
                ));
            }
            let mut rewards = Vec::with_capacity(group_size);
            for m in &g.members {
                if m.trajectory.prompt_id != g.prompt_id {
                    return Err(invalid("group", format!("group {} mixes prompts", g.group_id)));
                }
                rewards.push(
                    m.reward().ok_or_else(|| {
                        invalid("group", format!("group {} holds an incomplete trajectory", g.group_id))
                    })?,
                );
            }
            let advantages = grpo_advantages(&rewards, std_normalize)?;
            for (m, &a) in g.members.iter().zip(&advantages) {
                let tokens = &m.trajectory.tokens;
                for t in 0..tokens.len() {
                    records.push(TokenRecord {
                        state: StateId::new(g.prompt_id, tokens[..t].to_vec()),
                        token: tokens[t],
                        behavior_log_prob: m.behavior_log_probs[t],
                        behavior_version: m.behavior_versions[t],
                        advantage: a,
                        group_id: g.group_id,
                    });
                }
            }
            summaries.push(GroupSummary {
                group_id: g.group_id,
                prompt_id: g.prompt_id,
                rewards,
                advantages,
            });
        }
        Ok(Self {
            records,
            groups: summaries,
            group_size,
            replay_epoch: 0,
            staleness_epochs,
        })
    }

    /// The same records viewed at replay epoch `epoch`.
    pub fn replay_view(&self, epoch: usize) -> Result<Self> {
        if epoch > self.staleness_epochs {
            return Err(invalid(
                "epoch",
                format!("{epoch} exceeds staleness bound {}", self.staleness_epochs),
            ));
        }
        let mut view = self.clone();
        view.replay_epoch = epoch;
        Ok(view)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        let (sum, n) = self
            .groups
            .iter()
            .flat_map(|g| g.rewards.iter())
            .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn importance_ratios(&self, policy: &PolicyTable) -> Result<Vec<f64>> {
        self.records.iter().map(|r| r.importance_ratio(policy)).collect()
    }

    /// Mean of `|r_t - 1|` over all records.
    pub fn mean_abs_ratio_deviation(&self, policy: &PolicyTable) -> Result<f64> {
        if self.records.is_empty() {
            return Ok(0.0);
        }
        let ratios = self.importance_ratios(policy)?;
        Ok(ratios.iter().map(|r| (r - 1.0).abs()).sum::<f64>() / ratios.len() as f64)
    }

    /// Distinct states referenced by the records.
    pub fn states(&self) -> impl Iterator<Item = &StateId> {
        let mut seen = std::collections::BTreeSet::new();
        self.records
            .iter()
            .filter_map(move |r| seen.insert(&r.state).then_some(&r.state))
    }
}

/// Samples one group per `(slot, prompt)` from a frozen snapshot in parallel.
/// Slot `k` uses `stream.child(k)`; results are returned in slot order.
pub fn generate_groups(
    policy: &PolicyTable,
    spec: &EnvSpec,
    prompts: &[usize],
    group_size: usize,
    stream: &SeedStream,
    first_group_id: usize,
) -> Result<Vec<GroupInput>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(slot, &prompt_id)| {
            let members = generate_group(policy, spec, prompt_id, group_size, &stream.child(slot as u64))?;
            Ok(GroupInput {
                group_id: first_group_id + slot,
                prompt_id,
                members,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct PendingTrajectory {
    group_id: usize,
    member: usize,
    stream: SeedStream,
    sample: SampledTrajectory,
}

/// A trajectory that reached the horizon during [`PartialRolloutBuffer::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedTrajectory {
    pub group_id: usize,
    pub member: usize,
    pub sample: SampledTrajectory,
}

#[derive(Debug, Clone, PartialEq)]
struct WaitingGroup {
    prompt_id: usize,
    members: Vec<Option<SampledTrajectory>>,
}

/// Unfinished trajectories carried across iterations. Completed members wait
/// here until their whole group is done.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialRolloutBuffer {
    token_budget: usize,
    group_size: usize,
    pending: Vec<PendingTrajectory>,
    waiting: BTreeMap<usize, WaitingGroup>,
}

impl PartialRolloutBuffer {
    pub fn new(token_budget: usize, group_size: usize) -> Result<Self> {
        if token_budget == 0 {
            return Err(invalid("partial_rollout_budget", "must be >= 1"));
        }
        if group_size < 2 {
            return Err(invalid("group_size", format!("must be >= 2, got {group_size}")));
        }
        Ok(Self {
            token_budget,
            group_size,
            pending: Vec::new(),
            waiting: BTreeMap::new(),
        })
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    /// Starts a new group of empty trajectories; member `i` draws from
    /// `stream.child(i)` exactly as [`generate_group`] would.
    pub fn enqueue_group(&mut self, group_id: usize, prompt_id: usize, stream: &SeedStream) -> Result<()> {
        if self.waiting.contains_key(&group_id) {
            return Err(invalid("group_id", format!("{group_id} already in flight")));
        }
        self.waiting.insert(
            group_id,
            WaitingGroup {
                prompt_id,
                members: vec![None; self.group_size],
            },
        );
        for member in 0..self.group_size {
            self.pending.push(PendingTrajectory {
                group_id,
                member,
                stream: stream.child(member as u64),
                sample: SampledTrajectory::new(prompt_id),
            });
        }
        Ok(())
    }

    /// Number of groups not yet handed out by [`Self::take_ready_groups`].
    pub fn groups_in_flight(&self) -> usize {
        self.waiting.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Extends every pending trajectory by up to `token_budget` tokens under
    /// `policy`; trajectories that reach the horizon are scored and returned.
    pub fn step(&mut self, policy: &PolicyTable, spec: &EnvSpec) -> Result<Vec<CompletedTrajectory>> {
        let mut completed = Vec::new();
        let mut still_pending = Vec::with_capacity(self.pending.len());
        for mut p in std::mem::take(&mut self.pending) {
            p.sample.extend(policy, spec, &p.stream, self.token_budget)?;
            if p.sample.reward().is_some() {
                let group = self.waiting.get_mut(&p.group_id).expect("group registered at enqueue");
                group.members[p.member] = Some(p.sample.clone());
                completed.push(CompletedTrajectory {
                    group_id: p.group_id,
                    member: p.member,
                    sample: p.sample,
                });
            } else {
                still_pending.push(p);
            }
        }
        self.pending = still_pending;
        Ok(completed)
    }

    /// Removes and returns every group whose members are all complete.
    pub fn take_ready_groups(&mut self) -> Vec<GroupInput> {
        let ready: Vec<usize> = self
            .waiting
            .iter()
            .filter(|(_, g)| g.members.iter().all(Option::is_some))
            .map(|(&id, _)| id)
            .collect();
        ready
            .into_iter()
            .map(|id| {
                let g = self.waiting.remove(&id).expect("listed above");
                GroupInput {
                    group_id: id,
                    prompt_id: g.prompt_id,
                    members: g.members.into_iter().map(|m| m.expect("complete")).collect(),
                }
            })
            .collect()
    }
}

/// One call of the segmented generator: extend, then collect finished groups.
pub fn step_partial_rollout(
    buffer: &mut PartialRolloutBuffer,
    policy: &PolicyTable,
    spec: &EnvSpec,
) -> Result<Vec<CompletedTrajectory>> {
    buffer.step(policy, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardMode, Target};

    fn parity_env(v: usize, t: usize) -> EnvSpec {
        EnvSpec::generate(4, v, t, RewardMode::Parity, 5).unwrap()
    }

    #[test]
    fn advantages_examples() {
        let a = grpo_advantages(&[1.0, 0.0, 0.0, 1.0], true).unwrap();
        for (x, e) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((x - e).abs() < 1e-5);
        }
        assert_eq!(grpo_advantages(&[1.0; 4], true).unwrap(), vec![0.0; 4]);
        assert_eq!(grpo_advantages(&[0.0; 3], false).unwrap(), vec![0.0; 3]);
        assert!(grpo_advantages(&[1.0], true).is_err());
    }

    #[test]
    fn advantages_single_success_of_eight() {
        let rewards = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        // mean 1/8, population std sqrt(7)/8
        let std = 7f64.sqrt() / 8.0;
        let a = grpo_advantages(&rewards, true).unwrap();
        assert!((a[0] - 0.875 / (std + 1e-6)).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 0.125 / (std + 1e-6)).abs() < 1e-12);
        }
        let centred = grpo_advantages(&rewards, false).unwrap();
        assert_eq!(centred[0], 0.875);
        assert_eq!(centred[3], -0.125);
    }

    #[test]
    fn group_size_must_allow_variance() {
        let spec = parity_env(3, 2);
        let policy = PolicyTable::new(3).unwrap();
        assert!(generate_group(&policy, &spec, 0, 1, &SeedStream::new(0)).is_err());
    }

    #[test]
    fn deterministic_policy_gives_identical_members() {
        let spec = EnvSpec::new(3, 3, RewardMode::Parity, vec![Target::Residue(0)]).unwrap();
        let mut policy = PolicyTable::new(3).unwrap();
        let mut prefix = Vec::new();
        for _ in 0..3 {
            policy
                .set_logits(&StateId::new(0, prefix.clone()), vec![-700.0, 0.0, -700.0])
                .unwrap();
            prefix.push(1);
        }
        let g = generate_group(&policy, &spec, 0, 5, &SeedStream::new(3)).unwrap();
        assert!(g.iter().all(|m| m.trajectory.tokens == vec![1, 1, 1]));
        assert!(g.iter().all(|m| m.reward() == Some(1.0)));
    }

    #[test]
    fn groups_replay_with_same_seed() {
        let spec = parity_env(4, 3);
        let policy = PolicyTable::new(4).unwrap();
        let a = generate_group(&policy, &spec, 2, 6, &SeedStream::new(17)).unwrap();
        let b = generate_group(&policy, &spec, 2, 6, &SeedStream::new(17)).unwrap();
        assert_eq!(a, b);
        let c = generate_group(&policy, &spec, 2, 6, &SeedStream::new(18)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_broadcast_sequence_advantage() {
        let spec = parity_env(3, 3);
        let policy = PolicyTable::new(3).unwrap();
        let stream = SeedStream::new(8);
        let groups = generate_groups(&policy, &spec, &[0, 1, 2, 3], 4, &stream, 0).unwrap();
        let batch = RolloutBatch::from_groups(groups, 4, 2, true).unwrap();
        assert_eq!(batch.records.len(), 4 * 4 * 3);
        for chunk in batch.records.chunks(3) {
            assert!(chunk.iter().all(|r| r.advantage == chunk[0].advantage));
            assert_eq!(chunk[0].state.prefix.len(), 0);
            assert_eq!(chunk[2].state.prefix.len(), 2);
        }
        for g in &batch.groups {
            assert!(g.advantages.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn replay_view_bounds() {
        let spec = parity_env(3, 2);
        let policy = PolicyTable::new(3).unwrap();
        let groups = generate_groups(&policy, &spec, &[0], 3, &SeedStream::new(1), 0).unwrap();
        let batch = RolloutBatch::from_groups(groups, 3, 2, true).unwrap();
        let v = batch.replay_view(2).unwrap();
        assert_eq!(v.replay_epoch, 2);
        assert_eq!(v.records, batch.records);
        assert!(batch.replay_view(3).is_err());
    }

    #[test]
    fn on_policy_ratios_are_exactly_one() {
        let spec = parity_env(4, 3);
        let mut policy = PolicyTable::new(4).unwrap();
        policy.set_logits(&StateId::root(1), vec![0.3, -0.2, 1.1, 0.0]).unwrap();
        let groups = generate_groups(&policy, &spec, &[0, 1], 4, &SeedStream::new(2), 0).unwrap();
        let batch = RolloutBatch::from_groups(groups, 4, 0, true).unwrap();
        for s in batch.states().cloned().collect::<Vec<_>>() {
            policy.materialize(&s);
        }
        assert!(batch.importance_ratios(&policy).unwrap().iter().all(|&r| r == 1.0));
        assert_eq!(batch.mean_abs_ratio_deviation(&policy).unwrap(), 0.0);
    }

    #[test]
    fn from_groups_rejects_bad_groups() {
        let spec = parity_env(3, 2);
        let policy = PolicyTable::new(3).unwrap();
        let mut groups = generate_groups(&policy, &spec, &[0], 3, &SeedStream::new(1), 0).unwrap();
        groups[0].members.pop();
        assert!(RolloutBatch::from_groups(groups.clone(), 3, 0, true).is_err());
        groups[0].members.push(SampledTrajectory::new(0));
        assert!(RolloutBatch::from_groups(groups, 3, 0, true).is_err());
    }

    #[test]
    fn budget_at_least_horizon_completes_in_one_call() {
        let spec = parity_env(3, 4);
        let policy = PolicyTable::new(3).unwrap();
        let mut buf = PartialRolloutBuffer::new(4, 3).unwrap();
        buf.enqueue_group(0, 1, &SeedStream::new(4)).unwrap();
        let done = step_partial_rollout(&mut buf, &policy, &spec).unwrap();
        assert_eq!(done.len(), 3);
        assert_eq!(buf.pending_len(), 0);
        for c in &done {
            assert!(c.sample.behavior_versions.iter().all(|&v| v == 0));
        }
        assert_eq!(buf.take_ready_groups().len(), 1);
        assert_eq!(buf.groups_in_flight(), 0);
    }

    #[test]
    fn budget_two_horizon_four_needs_two_calls() {
        let spec = parity_env(3, 4);
        let mut policy = PolicyTable::new(3).unwrap();
        let mut buf = PartialRolloutBuffer::new(2, 2).unwrap();
        buf.enqueue_group(7, 0, &SeedStream::new(4)).unwrap();
        assert!(step_partial_rollout(&mut buf, &policy, &spec).unwrap().is_empty());
        assert!(buf.take_ready_groups().is_empty());
        let mut g = crate::policy::GradientTable::new(3);
        policy.materialize(&StateId::root(0));
        g.row_mut(&StateId::root(0))[0] = 1.0;
        policy.apply_gradient(&g, 0.1).unwrap();
        let done = step_partial_rollout(&mut buf, &policy, &spec).unwrap();
        assert_eq!(done.len(), 2);
        for c in &done {
            assert_eq!(c.sample.behavior_versions, vec![0, 0, 1, 1]);
        }
        let ready = buf.take_ready_groups();
        assert_eq!(ready.len(), 1);
        assert_eq!(ready[0].group_id, 7);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(PartialRolloutBuffer::new(0, 2).is_err());
    }
}
