//! Benchmarks for the laboratory hot paths.
//!
//! Shared fixtures live here so the bench binary stays declarative.

use bapo_core::rollout::generate_groups;
use bapo_core::theory::random_full_policy;
use bapo_core::{EnvSpec, PolicyTable, RewardMode, RolloutBatch, SeedStream};
use rand::Rng;

/// A parity environment, a random fully materialised policy, and one batch
/// sampled from it with `prompts` groups of `group_size`.
pub fn fixture(
    vocab: usize,
    horizon: usize,
    prompts: usize,
    group_size: usize,
) -> (EnvSpec, PolicyTable, RolloutBatch) {
    let spec = EnvSpec::generate(prompts, vocab, horizon, RewardMode::Parity, 3).expect("valid env");
    let policy = random_full_policy(&spec, &mut SeedStream::new(5).rng(), 1.5).expect("enumerable env");
    let ids: Vec<usize> = (0..prompts).collect();
    let groups = generate_groups(&policy, &spec, &ids, group_size, &SeedStream::new(7), 0).expect("groups");
    let batch = RolloutBatch::from_groups(groups, group_size, 0, true).expect("batch");
    (spec, policy, batch)
}

/// `policy` with every logit jittered by up to `scale / 2`, so importance
/// ratios move away from 1.
pub fn drifted(policy: &PolicyTable, scale: f64) -> PolicyTable {
    let mut out = policy.clone();
    let mut rng = SeedStream::new(11).rng();
    let states: Vec<_> = out.states().cloned().collect();
    for s in states {
        let z: Vec<f64> = out
            .logits(&s)
            .expect("materialised")
            .iter()
            .map(|z| z + scale * (rng.gen::<f64>() - 0.5))
            .collect();
        out.set_logits(&s, z).expect("same width");
    }
    out
}
