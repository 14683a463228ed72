//! Executable checks of the first-order theory behind clipped updates.
//!
//! Everything here works on a single state at a time unless noted. The
//! central object is the effective per-token signal of a batch: for token `y`,
//! `eff(y) = (1 / pi(y)) * sum of w * r * A over retained records at y`, where
//! `w` is the aggregation weight. One gradient-ascent step then moves each
//! logit by exactly `lr * pi(y) * (eff(y) + C)`, with
//! `C = clipped_correction + baseline`:
//!
//! * `clipped_correction = sum of w * r * A over clipped records`
//! * `baseline = -(sum of w * r * A over all records)`, which vanishes when the
//!   batch is centred so that the importance-weighted advantages sum to zero.
//!
//! Entropy moves to first order by `-lr * Cov_pi(log pi, pi * (eff + C))`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bapo::{search_bounds, BapoConfig, SearchTerminal};
use crate::env::{EnvSpec, RewardMode};
use crate::error::{invalid, Error, Result};
use crate::objective::{
    aggregation_weight, batch_gradient, clip_indicator, importance_ratios, objective_value, ClipBounds, LossAgg,
    ObjectiveConfig, RatioProbe,
};
use crate::policy::{entropy_of_logits, log_softmax, softmax, PolicyTable, StateId, Token};
use crate::rng::SeedStream;
use crate::rollout::{generate_groups, RolloutBatch, TokenRecord};

/// `sum p (x - E x)(y - E y)` under the distribution `p`.
pub fn cov_pi(p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let ex: f64 = p.iter().zip(x).map(|(p, x)| p * x).sum();
    let ey: f64 = p.iter().zip(y).map(|(p, y)| p * y).sum();
    p.iter()
        .zip(x.iter().zip(y))
        .map(|(p, (x, y))| p * (x - ex) * (y - ey))
        .sum()
}

// ---------------------------------------------------------------------------
// Exact values

/// Exact action values at one state, by enumerating every continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactValueTable {
    pub state: StateId,
    pub probs: Vec<f64>,
    /// Expected terminal reward after emitting each token.
    pub q: Vec<f64>,
    /// Expected terminal reward from the state itself.
    pub v: f64,
}

impl ExactValueTable {
    pub fn advantages(&self) -> Vec<f64> {
        self.q.iter().map(|q| q - self.v).collect()
    }

    /// `sum_y pi(y) A(y)`; zero up to rounding.
    pub fn expected_advantage(&self) -> f64 {
        self.probs.iter().zip(self.advantages()).map(|(p, a)| p * a).sum()
    }
}

/// Sums `prod pi * reward` over all completions of `prefix`, visiting each
/// completion as a whole sequence.
fn continuation_value(spec: &EnvSpec, policy: &PolicyTable, prompt_id: usize, prefix: &[Token]) -> Result<f64> {
    let depth = prefix.len();
    spec.check_enumerable(depth)?;
    let remaining = spec.horizon() - depth;
    let vocab = spec.vocab_size();
    let mut digits = vec![0usize; remaining];
    let mut tokens = prefix.to_vec();
    let mut total = 0.0;
    loop {
        tokens.truncate(depth);
        let mut weight = 1.0;
        for &d in &digits {
            let state = StateId::new(prompt_id, tokens.clone());
            weight *= softmax(policy.logits_or_init(&state))[d];
            tokens.push(d);
        }
        total += weight * spec.reward(prompt_id, &tokens)?;
        // odometer increment, last position fastest
        let mut pos = remaining;
        loop {
            if pos == 0 {
                return Ok(total);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < vocab {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Exact `Q`, `V` and advantages at `state`.
pub fn exact_advantages(policy: &PolicyTable, spec: &EnvSpec, state: &StateId) -> Result<ExactValueTable> {
    spec.check_state(state)?;
    spec.check_enumerable(state.depth())?;
    let probs = softmax(policy.logits_or_init(state));
    let mut q = Vec::with_capacity(spec.vocab_size());
    for y in 0..spec.vocab_size() {
        let next = state.extend(y);
        q.push(continuation_value(spec, policy, state.prompt_id, &next.prefix)?);
    }
    let v = continuation_value(spec, policy, state.prompt_id, &state.prefix)?;
    Ok(ExactValueTable {
        state: state.clone(),
        probs,
        q,
        v,
    })
}

/// Every non-terminal state of `prompt_id`, shallowest first.
pub fn reachable_states(spec: &EnvSpec, prompt_id: usize) -> Result<Vec<StateId>> {
    spec.check_enumerable(0)?;
    if prompt_id >= spec.num_prompts() {
        return Err(invalid("prompt_id", format!("{prompt_id} out of range")));
    }
    let mut out = vec![StateId::root(prompt_id)];
    let mut frontier = 0;
    while frontier < out.len() {
        let s = out[frontier].clone();
        frontier += 1;
        if s.depth() + 1 < spec.horizon() {
            for y in 0..spec.vocab_size() {
                out.push(s.extend(y));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Logit and entropy dynamics at one state

/// Per-token decomposition of one update at a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSignal {
    pub state: StateId,
    pub probs: Vec<f64>,
    /// `eff(y)` for each vocabulary token; 0 where no record is retained.
    pub effective: Vec<f64>,
    pub clipped_correction: f64,
    pub baseline: f64,
    pub clipped_records: usize,
}

impl TokenSignal {
    pub fn constant_c(&self) -> f64 {
        self.clipped_correction + self.baseline
    }

    /// `pi(y) * (eff(y) + C)`: the logit change per unit learning rate.
    pub fn logit_signal(&self) -> Vec<f64> {
        let c = self.constant_c();
        self.probs
            .iter()
            .zip(&self.effective)
            .map(|(p, e)| p * (e + c))
            .collect()
    }
}

fn single_state(batch: &RolloutBatch) -> Result<&StateId> {
    let first = batch
        .records
        .first()
        .ok_or_else(|| invalid("batch", "needs at least one record"))?;
    if batch.records.iter().any(|r| r.state != first.state) {
        return Err(invalid("batch", "records must share one state"));
    }
    Ok(&first.state)
}

pub fn token_signal(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
) -> Result<TokenSignal> {
    let state = single_state(batch)?.clone();
    let probs = policy.probs(&state)?;
    let ratios = importance_ratios(policy, batch)?;
    let w = aggregation_weight(batch, objective.loss_agg);
    let mut retained_mass = vec![0.0; policy.vocab_size()];
    let mut clipped_correction = 0.0;
    let mut total = 0.0;
    let mut clipped_records = 0;
    for (rec, r) in batch.records.iter().zip(ratios) {
        if rec.advantage == 0.0 {
            continue;
        }
        let mass = w * r * rec.advantage;
        total += mass;
        if clip_indicator(r, rec.advantage, bounds) {
            retained_mass[rec.token] += mass;
        } else {
            clipped_correction += mass;
            clipped_records += 1;
        }
    }
    let effective = retained_mass.iter().zip(&probs).map(|(m, p)| m / p).collect();
    Ok(TokenSignal {
        state,
        probs,
        effective,
        clipped_correction,
        baseline: -total,
        clipped_records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitUpdateReport {
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
    pub max_abs_deviation: f64,
    pub clipped_records: usize,
    pub constant_c: f64,
}

/// Compares the logit change of a real update against
/// `lr * pi(y) * (eff(y) + C)`.
pub fn verify_logit_update(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
    learning_rate: f64,
) -> Result<LogitUpdateReport> {
    let signal = token_signal(policy, batch, bounds, objective)?;
    let predicted: Vec<f64> = signal.logit_signal().iter().map(|s| learning_rate * s).collect();
    let before = policy.logits_or_init(&signal.state).to_vec();
    let mut next = policy.clone();
    next.materialize(&signal.state);
    let (grad, _) = batch_gradient(&next, batch, bounds, objective)?;
    next.apply_gradient(&grad, learning_rate)?;
    let actual: Vec<f64> = next
        .logits(&signal.state)?
        .iter()
        .zip(&before)
        .map(|(a, b)| a - b)
        .collect();
    let max_abs_deviation = predicted
        .iter()
        .zip(&actual)
        .map(|(p, a)| (p - a).abs())
        .fold(0.0, f64::max);
    Ok(LogitUpdateReport {
        predicted,
        actual,
        max_abs_deviation,
        clipped_records: signal.clipped_records,
        constant_c: signal.constant_c(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPrediction {
    /// `-lr * covariance`.
    pub predicted_delta: f64,
    /// `Cov_pi(log pi, pi * (eff + C))`.
    pub covariance: f64,
    pub constant_c: f64,
    /// `Cov_pi(log pi, eff + C)`, the covariance without the `pi` factor.
    pub literal_covariance: f64,
}

pub fn predict_entropy_delta(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
    learning_rate: f64,
) -> Result<EntropyPrediction> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(invalid(
            "learning_rate",
            format!("must be positive, got {learning_rate}"),
        ));
    }
    let signal = token_signal(policy, batch, bounds, objective)?;
    let log_p: Vec<f64> = signal.probs.iter().map(|p| p.ln()).collect();
    let covariance = cov_pi(&signal.probs, &log_p, &signal.logit_signal());
    let c = signal.constant_c();
    let shifted: Vec<f64> = signal.effective.iter().map(|e| e + c).collect();
    Ok(EntropyPrediction {
        predicted_delta: -learning_rate * covariance,
        covariance,
        constant_c: c,
        literal_covariance: cov_pi(&signal.probs, &log_p, &shifted),
    })
}

/// Entropy change of the state after one real update.
pub fn measure_entropy_delta(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
    learning_rate: f64,
) -> Result<f64> {
    let state = single_state(batch)?;
    let mut next = policy.clone();
    next.materialize(state);
    let before = entropy_of_logits(next.logits(state)?);
    let (grad, _) = batch_gradient(&next, batch, bounds, objective)?;
    next.apply_gradient(&grad, learning_rate)?;
    Ok(entropy_of_logits(next.logits(state)?) - before)
}

// ---------------------------------------------------------------------------
// Token classes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyEffect {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClass {
    pub prob_class: Level,
    pub adv_class: Level,
    pub predicted_effect: EntropyEffect,
}

/// Matching levels sharpen the distribution; mixed levels flatten it.
pub fn entropy_effect(prob: Level, adv: Level) -> EntropyEffect {
    if prob == adv {
        EntropyEffect::Decrease
    } else {
        EntropyEffect::Increase
    }
}

/// `exp(E_pi[log pi])`, the probability threshold between high and low.
pub fn probability_threshold(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p * p.ln()).sum::<f64>().exp()
}

/// `sum over retained tokens of pi(y) * A(y)`.
pub fn retained_mean(probs: &[f64], retained: &[(Token, f64)]) -> f64 {
    retained.iter().map(|&(t, a)| probs[t] * a).sum()
}

fn check_retained(vocab: usize, retained: &[(Token, f64)]) -> Result<()> {
    if retained.is_empty() {
        return Err(invalid("retained set", "must be nonempty"));
    }
    let mut seen = vec![false; vocab];
    for &(t, a) in retained {
        if t >= vocab {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: vocab,
            });
        }
        if seen[t] {
            return Err(invalid("retained set", format!("token {t} listed twice")));
        }
        if !a.is_finite() {
            return Err(invalid("retained set", format!("advantage of token {t} is not finite")));
        }
        seen[t] = true;
    }
    Ok(())
}

/// Classifies a retained token. `retained` lists every retained token with
/// its advantage; a token outside it is clipped and has no class.
pub fn classify_token(
    policy: &PolicyTable,
    state: &StateId,
    token: Token,
    retained: &[(Token, f64)],
) -> Result<TokenClass> {
    let probs = softmax(policy.logits_or_init(state));
    check_retained(probs.len(), retained)?;
    let advantage = retained
        .iter()
        .find(|(t, _)| *t == token)
        .map(|(_, a)| *a)
        .ok_or_else(|| {
            invalid(
                "token",
                format!("token {token} is clipped; only retained tokens are classified"),
            )
        })?;
    let prob_class = if probs[token] > probability_threshold(&probs) {
        Level::High
    } else {
        Level::Low
    };
    let adv_class = if advantage > retained_mean(&probs, retained) {
        Level::High
    } else {
        Level::Low
    };
    Ok(TokenClass {
        prob_class,
        adv_class,
        predicted_effect: entropy_effect(prob_class, adv_class),
    })
}

/// `-lr * pi(y) * (log pi(y) - E[log pi]) * (A(y) - m)`.
pub fn entropy_contribution(probs: &[f64], token: Token, advantage: f64, mean: f64, learning_rate: f64) -> f64 {
    let e_log: f64 = probs.iter().map(|p| p * p.ln()).sum();
    -learning_rate * probs[token] * (probs[token].ln() - e_log) * (advantage - mean)
}

/// `f(x) = x (log x - c)`; positive exactly when `x > e^c`.
pub fn entropy_sign_function(x: f64, c: f64) -> f64 {
    x * (x.ln() - c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SignTableReport {
    pub instances: usize,
    pub tokens_checked: usize,
    pub boundary_excluded: usize,
    pub violations: usize,
    /// Largest gap between the summed contributions over the vocabulary and
    /// `-lr * Cov_pi(log pi, A X)`.
    pub max_total_error: f64,
}

/// Random single-state instance: probabilities and a retained set with one
/// advantage per token.
pub fn random_sign_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<(Token, f64)>) {
    let vocab = rng.gen_range(3..=8);
    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let probs = softmax(&logits);
    let mut tokens: Vec<Token> = (0..vocab).collect();
    tokens.shuffle(rng);
    let keep = rng.gen_range(1..=vocab);
    let retained = tokens[..keep].iter().map(|&t| (t, rng.gen_range(-2.0..2.0))).collect();
    (probs, retained)
}

pub fn verify_sign_table(trials: usize, stream: &SeedStream) -> Result<SignTableReport> {
    if trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    let lr = 1e-2;
    let per: Vec<SignTableReport> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let (probs, retained) = random_sign_instance(&mut stream.child(i).rng());
            let mut rep = SignTableReport {
                instances: 1,
                ..Default::default()
            };
            let threshold = probability_threshold(&probs);
            let mean = retained_mean(&probs, &retained);
            for &(t, a) in &retained {
                if probs[t] == threshold || a == mean {
                    rep.boundary_excluded += 1;
                    continue;
                }
                let prob = if probs[t] > threshold { Level::High } else { Level::Low };
                let adv = if a > mean { Level::High } else { Level::Low };
                let value = entropy_contribution(&probs, t, a, mean, lr);
                let ok = match entropy_effect(prob, adv) {
                    EntropyEffect::Decrease => value < 0.0,
                    EntropyEffect::Increase => value > 0.0,
                };
                rep.tokens_checked += 1;
                rep.violations += usize::from(!ok);
            }
            let mut ax = vec![0.0; probs.len()];
            for &(t, a) in &retained {
                ax[t] = a;
            }
            let total: f64 = (0..probs.len())
                .map(|t| entropy_contribution(&probs, t, ax[t], mean, lr))
                .sum();
            let log_p: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
            rep.max_total_error = (total + lr * cov_pi(&probs, &log_p, &ax)).abs();
            rep
        })
        .collect();
    Ok(per
        .into_iter()
        .fold(SignTableReport::default(), |acc, r| SignTableReport {
            instances: acc.instances + r.instances,
            tokens_checked: acc.tokens_checked + r.tokens_checked,
            boundary_excluded: acc.boundary_excluded + r.boundary_excluded,
            violations: acc.violations + r.violations,
            max_total_error: acc.max_total_error.max(r.max_total_error),
        }))
}

// ---------------------------------------------------------------------------
// Random instances

/// How many records of a single-state instance end up clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipCount {
    Zero,
    One,
    Many,
}

fn record(policy: &PolicyTable, state: &StateId, token: Token, r: f64, advantage: f64) -> TokenRecord {
    let lp = policy.log_prob(state, token).expect("state materialized");
    TokenRecord {
        state: state.clone(),
        token,
        behavior_log_prob: lp - r.ln(),
        behavior_version: 0,
        advantage,
        group_id: 0,
    }
}

fn batch_of(records: Vec<TokenRecord>) -> RolloutBatch {
    RolloutBatch {
        records,
        groups: Vec::new(),
        group_size: 2,
        replay_epoch: 0,
        staleness_epochs: 0,
    }
}

/// Bounds used by the single-state instances.
pub fn instance_bounds() -> ClipBounds {
    ClipBounds::new(0.8, 1.2).expect("valid")
}

/// A random single-state policy and batch at [`instance_bounds`] whose
/// importance-weighted advantages sum to zero and whose clipped record count
/// falls in `clip`. Ratios stay at least 0.05 away from both bounds.
pub fn single_state_instance(rng: &mut ChaCha8Rng, clip: ClipCount) -> (PolicyTable, RolloutBatch) {
    let bounds = instance_bounds();
    loop {
        let vocab = rng.gen_range(3..=8);
        let mut policy = PolicyTable::new(vocab).expect("vocab >= 3");
        let state = StateId::root(0);
        let logits = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        policy.set_logits(&state, logits).expect("finite");
        let n = rng.gen_range(vocab..=2 * vocab);
        let designated = match clip {
            ClipCount::Zero => 0,
            ClipCount::One => 1,
            ClipCount::Many => rng.gen_range(2..=n / 2 + 1).min(n),
        };
        let ratios: Vec<f64> = (0..n)
            .map(|i| {
                if i < designated {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(1.25..2.0)
                    } else {
                        rng.gen_range(0.3..0.75)
                    }
                } else {
                    rng.gen_range(0.85..1.15)
                }
            })
            .collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shift = ratios.iter().zip(&raw).map(|(r, a)| r * a).sum::<f64>() / ratios.iter().sum::<f64>();
        let advantages: Vec<f64> = raw.iter().map(|a| a - shift).collect();
        if advantages.iter().any(|a| a.abs() < 1e-3) {
            continue;
        }
        let clipped = ratios
            .iter()
            .zip(&advantages)
            .filter(|(r, a)| !clip_indicator(**r, **a, bounds))
            .count();
        let ok = match clip {
            ClipCount::Zero => clipped == 0,
            ClipCount::One => clipped == 1,
            ClipCount::Many => clipped >= 2,
        };
        if !ok {
            continue;
        }
        let records = (0..n)
            .map(|i| record(&policy, &state, rng.gen_range(0..vocab), ratios[i], advantages[i]))
            .collect();
        return (policy, batch_of(records));
    }
}

/// A multi-state batch drawn from a random parity environment, scored under a
/// perturbed copy of the sampling policy so that ratios spread around 1.
/// Every ratio stays at least `margin` away from both bounds and the batch
/// contains both clipped and retained records.
pub fn random_stale_batch(
    stream: &SeedStream,
    bounds: ClipBounds,
    margin: f64,
) -> Result<(EnvSpec, PolicyTable, RolloutBatch)> {
    for attempt in 0u64.. {
        let mut rng = stream.child(attempt).rng();
        let vocab = rng.gen_range(3..=8);
        let horizon = rng.gen_range(2..=4);
        let spec = EnvSpec::generate(2, vocab, horizon, RewardMode::Parity, rng.gen())?;
        let mut behavior = PolicyTable::new(vocab)?;
        for p in 0..spec.num_prompts() {
            for s in reachable_states(&spec, p)? {
                behavior.set_logits(&s, (0..vocab).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            }
        }
        let groups = generate_groups(&behavior, &spec, &[0, 1], 4, &stream.child(attempt).child(1), 0)?;
        let batch = RolloutBatch::from_groups(groups, 4, 0, true)?;
        if batch.records.iter().all(|r| r.advantage == 0.0) {
            continue;
        }
        let mut policy = behavior.clone();
        let states: Vec<StateId> = batch.states().cloned().collect();
        for s in &states {
            let z: Vec<f64> = policy.logits(s)?.iter().map(|z| z + rng.gen_range(-0.4..0.4)).collect();
            policy.set_logits(s, z)?;
        }
        let ratios = importance_ratios(&policy, &batch)?;
        let near = ratios
            .iter()
            .any(|r| (r - bounds.c_low()).abs() < margin || (r - bounds.c_high()).abs() < margin);
        let live: Vec<bool> = batch
            .records
            .iter()
            .zip(&ratios)
            .filter(|(rec, _)| rec.advantage != 0.0)
            .map(|(rec, r)| clip_indicator(*r, rec.advantage, bounds))
            .collect();
        if near || !live.iter().any(|x| *x) || live.iter().all(|x| *x) {
            continue;
        }
        return Ok((spec, policy, batch));
    }
    unreachable!("the attempt counter is unbounded")
}

/// Random environment with a small enumeration budget.
pub fn random_small_env(rng: &mut ChaCha8Rng) -> Result<EnvSpec> {
    let vocab = rng.gen_range(2..=5);
    let horizon = rng.gen_range(1..=4);
    let mode = if rng.gen_bool(0.5) {
        RewardMode::Parity
    } else {
        RewardMode::ExactMatch
    };
    EnvSpec::generate(rng.gen_range(1..=3), vocab, horizon, mode, rng.gen())
}

/// Fills every reachable state of `spec` with random logits in `[-s, s]`.
pub fn random_full_policy(spec: &EnvSpec, rng: &mut ChaCha8Rng, scale: f64) -> Result<PolicyTable> {
    let mut policy = PolicyTable::new(spec.vocab_size())?;
    for p in 0..spec.num_prompts() {
        for s in reachable_states(spec, p)? {
            let z = (0..spec.vocab_size()).map(|_| rng.gen_range(-scale..scale)).collect();
            policy.set_logits(&s, z)?;
        }
    }
    Ok(policy)
}

/// Every candidate bound pair in the order the search visits them, built
/// from two explicit ladders.
pub fn candidate_ladder(cfg: &BapoConfig) -> Result<Vec<ClipBounds>> {
    cfg.validate()?;
    let ladder = |start: f64, end: f64, step: f64| {
        let mut v = vec![start];
        let mut k = 1.0;
        while start + k * step <= end + 1e-9 {
            let x = start + k * step;
            v.push(if (x - end).abs() <= 1e-9 { end } else { x });
            k += 1.0;
        }
        v
    };
    let highs = ladder(cfg.clip_high_range.0, cfg.clip_high_range.1, cfg.delta1);
    let lows = ladder(cfg.clip_low_range.0, cfg.clip_low_range.1, cfg.delta2);
    if lows.len() == 1 {
        return Ok(vec![ClipBounds::new(lows[0], highs[0])?]);
    }
    let top = *highs.last().expect("nonempty");
    let mut out = Vec::with_capacity(highs.len() + lows.len() - 1);
    for &h in &highs {
        out.push(ClipBounds::new(lows[0], h)?);
    }
    for &l in &lows[1..] {
        out.push(ClipBounds::new(l, top)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Suite

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub gradient_rel: f64,
    pub finite_difference_step: f64,
    pub log_derivative_abs: f64,
    pub advantage_mean_abs: f64,
    pub logit_update_abs: f64,
    pub entropy_slope: (f64, f64),
    pub entropy_rel: f64,
    /// Instances with a smaller covariance are resampled.
    pub min_covariance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gradient_rel: 1e-6,
            finite_difference_step: 1e-5,
            log_derivative_abs: 1e-8,
            advantage_mean_abs: 1e-12,
            logit_update_abs: 1e-10,
            entropy_slope: (1.8, 2.2),
            entropy_rel: 0.05,
            min_covariance: 1e-3,
        }
    }
}

impl Tolerances {
    pub const PROFILES: [&'static str; 3] = ["default", "strict", "loose"];

    pub fn profile(name: &str) -> Result<Self> {
        let d = Self::default();
        match name {
            "default" => Ok(d),
            "strict" => Ok(Self {
                gradient_rel: 1e-7,
                log_derivative_abs: 1e-9,
                advantage_mean_abs: 1e-13,
                logit_update_abs: 1e-11,
                entropy_slope: (1.9, 2.1),
                entropy_rel: 0.02,
                ..d
            }),
            "loose" => Ok(Self {
                gradient_rel: 1e-5,
                log_derivative_abs: 1e-7,
                advantage_mean_abs: 1e-11,
                logit_update_abs: 1e-9,
                entropy_slope: (1.7, 2.3),
                entropy_rel: 0.1,
                ..d
            }),
            other => Err(invalid(
                "tolerance profile",
                format!("unknown profile {other:?}; expected one of {:?}", Self::PROFILES),
            )),
        }
    }
}

/// Deliberate defects used to confirm that checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Adds a small offset to one analytic gradient entry.
    PerturbGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Overrides every check's instance count.
    pub trials: Option<usize>,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: None,
            tolerances: Tolerances::default(),
            seed: 0x5eed,
            fault: None,
        }
    }
}

impl VerifyOptions {
    fn count(&self, default: usize) -> usize {
        self.trials.unwrap_or(default).max(1)
    }

    fn stream(&self, domain: u64) -> SeedStream {
        SeedStream::new(self.seed).child(domain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub trials: usize,
    /// Worst observed error, in the check's own units.
    pub worst: f64,
    pub limit: String,
    pub detail: String,
    /// Per-trial error magnitudes.
    pub errors: Vec<f64>,
}

fn worst(errors: &[f64]) -> f64 {
    errors
        .iter()
        .copied()
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Analytic gradient against central differences of the objective, over all
/// touched logits. Returns the relative error `|g - fd| / max(|fd|, 1e-12)`.
pub fn gradient_fd_error(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    bounds: ClipBounds,
    objective: &ObjectiveConfig,
    h: f64,
    fault: Option<Fault>,
) -> Result<f64> {
    let (grad, _) = batch_gradient(policy, batch, bounds, objective)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let states: Vec<StateId> = batch.states().cloned().collect();
    let mut probe = policy.clone();
    for s in &states {
        let base = policy.logits(s)?.to_vec();
        let row = grad.get(s);
        for j in 0..base.len() {
            analytic.push(row.map_or(0.0, |r| r[j]));
            let mut plus = base.clone();
            plus[j] += h;
            probe.set_logits(s, plus)?;
            let fp = objective_value(&probe, batch, bounds, objective)?;
            let mut minus = base.clone();
            minus[j] -= h;
            probe.set_logits(s, minus)?;
            let fm = objective_value(&probe, batch, bounds, objective)?;
            probe.set_logits(s, base.clone())?;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    if fault == Some(Fault::PerturbGradient) {
        if let Some(first) = analytic.first_mut() {
            *first += 1e-3;
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    Ok(diff / norm.max(1e-12))
}

pub fn check_gradient(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(100);
    let tol = &opts.tolerances;
    let bounds = instance_bounds();
    let stream = opts.stream(1);
    let errors: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (_, policy, batch) = random_stale_batch(&stream.child(i), bounds, 1e-3)?;
            let objective = ObjectiveConfig {
                loss_agg: if i % 2 == 0 { LossAgg::TokenMean } else { LossAgg::Sum },
                ..Default::default()
            };
            gradient_fd_error(
                &policy,
                &batch,
                bounds,
                &objective,
                tol.finite_difference_step,
                opts.fault,
            )
        })
        .collect::<Result<_>>()?;
    let w = worst(&errors);
    Ok(CheckReport {
        name: "gradient",
        passed: w < tol.gradient_rel,
        trials: n,
        worst: w,
        limit: format!("relative error < {:e}", tol.gradient_rel),
        detail: format!("central differences, h = {:e}", tol.finite_difference_step),
        errors,
    })
}

pub fn check_log_derivative(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(1000);
    let tol = &opts.tolerances;
    let h = tol.finite_difference_step;
    let stream = opts.stream(2);
    let errors: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.child(i).rng();
            let vocab = rng.gen_range(2..=8);
            let z: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let token = rng.gen_range(0..vocab);
            let mut policy = PolicyTable::new(vocab)?;
            policy.set_logits(&StateId::root(0), z.clone())?;
            let analytic = policy.log_prob_gradient(&StateId::root(0), token)?;
            let mut err: f64 = 0.0;
            for j in 0..vocab {
                let mut zp = z.clone();
                zp[j] += h;
                let mut zm = z.clone();
                zm[j] -= h;
                let fd = (log_softmax(&zp)[token] - log_softmax(&zm)[token]) / (2.0 * h);
                err = err.max((fd - analytic[j]).abs());
            }
            Ok(err)
        })
        .collect::<Result<_>>()?;
    let w = worst(&errors);
    Ok(CheckReport {
        name: "log_derivative",
        passed: w < tol.log_derivative_abs,
        trials: n,
        worst: w,
        limit: format!("max abs error < {:e}", tol.log_derivative_abs),
        detail: "softmax log-derivative against central differences".into(),
        errors,
    })
}

pub fn check_advantage_mean(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(20);
    let tol = &opts.tolerances;
    let stream = opts.stream(3);
    let per_env: Vec<(f64, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.child(i).rng();
            let spec = random_small_env(&mut rng)?;
            let policy = random_full_policy(&spec, &mut rng, 2.0)?;
            let mut err: f64 = 0.0;
            let mut states = 0;
            for p in 0..spec.num_prompts() {
                for s in reachable_states(&spec, p)? {
                    err = err.max(exact_advantages(&policy, &spec, &s)?.expected_advantage().abs());
                    states += 1;
                }
            }
            Ok((err, states))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = per_env.iter().map(|e| e.0).collect();
    let states: usize = per_env.iter().map(|e| e.1).sum();
    let w = worst(&errors);
    Ok(CheckReport {
        name: "advantage_mean",
        passed: w < tol.advantage_mean_abs,
        trials: n,
        worst: w,
        limit: format!("|E_pi[A]| < {:e}", tol.advantage_mean_abs),
        detail: format!("{states} reachable states across {n} environments"),
        errors,
    })
}

pub fn check_logit_update(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(100);
    let tol = &opts.tolerances;
    let stream = opts.stream(4);
    let cases = [ClipCount::Zero, ClipCount::One, ClipCount::Many];
    let errors: Vec<f64> = (0..(3 * n) as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.child(i).rng();
            let (policy, batch) = single_state_instance(&mut rng, cases[(i % 3) as usize]);
            let objective = ObjectiveConfig::default();
            Ok(verify_logit_update(&policy, &batch, instance_bounds(), &objective, 0.1)?.max_abs_deviation)
        })
        .collect::<Result<_>>()?;
    let w = worst(&errors);
    Ok(CheckReport {
        name: "logit_update",
        passed: w < tol.logit_update_abs,
        trials: 3 * n,
        worst: w,
        limit: format!("max logit deviation < {:e}", tol.logit_update_abs),
        detail: format!("{n} instances each with zero, one and many clipped records"),
        errors,
    })
}

/// Learning rates of the entropy scaling check.
pub const ENTROPY_RATES: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyScaling {
    pub covariance: f64,
    pub errors: [f64; 3],
    pub slope: f64,
    /// Relative prediction error at the smallest rate.
    pub relative_error: f64,
}

/// Prediction error of the entropy rule at each of [`ENTROPY_RATES`].
pub fn entropy_scaling(
    policy: &PolicyTable,
    batch: &RolloutBatch,
    objective: &ObjectiveConfig,
) -> Result<EntropyScaling> {
    let bounds = instance_bounds();
    let mut errors = [0.0; 3];
    let mut covariance = 0.0;
    let mut relative_error = 0.0;
    for (k, &lr) in ENTROPY_RATES.iter().enumerate() {
        let pred = predict_entropy_delta(policy, batch, bounds, objective, lr)?;
        let actual = measure_entropy_delta(policy, batch, bounds, objective, lr)?;
        errors[k] = (actual - pred.predicted_delta).abs();
        covariance = pred.covariance;
        relative_error = errors[k] / pred.predicted_delta.abs();
    }
    Ok(EntropyScaling {
        covariance,
        errors,
        slope: log_log_slope(&ENTROPY_RATES, &errors),
        relative_error,
    })
}

pub fn check_entropy_rule(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(100);
    let tol = opts.tolerances;
    let stream = opts.stream(5);
    let cases = [ClipCount::Zero, ClipCount::One, ClipCount::Many];
    let results: Vec<EntropyScaling> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let s = stream.child(i);
            for attempt in 0u64.. {
                let mut rng = s.child(attempt).rng();
                let (policy, batch) = single_state_instance(&mut rng, cases[(i % 3) as usize]);
                let objective = ObjectiveConfig::default();
                let pred = predict_entropy_delta(&policy, &batch, instance_bounds(), &objective, 1.0)?;
                if pred.covariance.abs() > tol.min_covariance {
                    return entropy_scaling(&policy, &batch, &objective);
                }
            }
            unreachable!("the attempt counter is unbounded")
        })
        .collect::<Result<_>>()?;
    let (lo, hi) = tol.entropy_slope;
    let bad_slopes = results.iter().filter(|r| !(r.slope >= lo && r.slope <= hi)).count();
    let errors: Vec<f64> = results.iter().map(|r| r.relative_error).collect();
    let w = worst(&errors);
    let min_slope = results.iter().map(|r| r.slope).fold(f64::INFINITY, f64::min);
    let max_slope = results.iter().map(|r| r.slope).fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckReport {
        name: "entropy_rule",
        passed: bad_slopes == 0 && w <= tol.entropy_rel,
        trials: n,
        worst: w,
        limit: format!(
            "slope in [{lo}, {hi}] and relative error <= {} at lr = 1e-4",
            tol.entropy_rel
        ),
        detail: format!("slopes in [{min_slope:.4}, {max_slope:.4}], {bad_slopes} outside"),
        errors,
    })
}

pub fn check_sign_table(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(1000);
    let rep = verify_sign_table(n, &opts.stream(6))?;
    Ok(CheckReport {
        name: "sign_table",
        passed: rep.violations == 0 && rep.max_total_error < 1e-12,
        trials: n,
        worst: rep.violations as f64,
        limit: "zero sign violations".into(),
        detail: format!(
            "{} tokens checked, {} on a boundary, summed-contribution gap {:e}",
            rep.tokens_checked, rep.boundary_excluded, rep.max_total_error
        ),
        errors: vec![rep.violations as f64],
    })
}

fn random_bapo_config(rng: &mut ChaCha8Rng) -> BapoConfig {
    let a_minus = rng.gen_range(0.0..0.6);
    let a_plus = rng.gen_range(1.01..1.6);
    BapoConfig {
        rho0: rng.gen_range(0.05..0.95),
        clip_low_range: (a_minus, (a_minus + rng.gen_range(0.0..0.35)).min(0.99)),
        clip_high_range: (a_plus, a_plus + rng.gen_range(0.0..2.0)),
        delta1: rng.gen_range(0.02..0.3),
        delta2: rng.gen_range(0.01..0.1),
    }
}

fn random_probe(rng: &mut ChaCha8Rng) -> RatioProbe {
    let n = rng.gen_range(1..=16);
    let terms = (0..n)
        .map(|_| {
            let a = if rng.gen_bool(0.5) {
                rng.gen_range(0.1..2.0)
            } else {
                -rng.gen_range(0.1..2.0)
            };
            (rng.gen_range(0.2..3.5), a, rng.gen_range(0.01..1.0))
        })
        .collect();
    RatioProbe::from_terms(terms).expect("valid terms")
}

pub fn check_bound_search(opts: &VerifyOptions) -> Result<CheckReport> {
    let n = opts.count(200);
    let stream = opts.stream(7);
    let mut failures = Vec::new();

    // a fixed infeasible batch under the default configuration
    let cfg = BapoConfig::default();
    let infeasible = RatioProbe::from_terms(vec![(1.0, -1.0, 1.0)])?;
    let (b, t) = search_bounds(&infeasible, &cfg)?;
    let high_steps = t.points.iter().take_while(|p| p.c_low == cfg.clip_low_range.0).count() - 1;
    if (b.c_low(), b.c_high()) != (0.9, 3.0) || high_steps != 36 || t.terminal != SearchTerminal::RangeExhausted {
        failures.push(format!(
            "default exhaustion ended at ({}, {}) after {high_steps} c_high steps",
            b.c_low(),
            b.c_high()
        ));
    }

    let errors: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.child(i).rng();
            let cfg = random_bapo_config(&mut rng);
            let probe = random_probe(&mut rng);
            let (bounds, trace) = search_bounds(&probe, &cfg)?;
            let ladder = candidate_ladder(&cfg)?;
            let expected = ladder
                .iter()
                .find(|c| probe.ratio(**c) >= cfg.rho0)
                .or(ladder.last())
                .copied()
                .expect("ladder is nonempty");
            let ok = trace.points.len() <= cfg.max_iterations() && bounds == expected;
            Ok(if ok { 0.0 } else { 1.0 })
        })
        .collect::<Result<_>>()?;
    let mismatches = errors.iter().filter(|e| **e > 0.0).count();
    if mismatches > 0 {
        failures.push(format!("{mismatches} searches disagree with the ordered scan"));
    }
    Ok(CheckReport {
        name: "bound_search",
        passed: failures.is_empty(),
        trials: n,
        worst: mismatches as f64,
        limit: "termination bound, default exhaustion, ordered-scan agreement".into(),
        detail: if failures.is_empty() {
            "all searches agree with the ordered scan".into()
        } else {
            failures.join("; ")
        },
        errors,
    })
}

/// Runs every check in a fixed order.
pub fn run_suite(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_gradient(opts)?,
        check_log_derivative(opts)?,
        check_advantage_mean(opts)?,
        check_logit_update(opts)?,
        check_entropy_rule(opts)?,
        check_sign_table(opts)?,
        check_bound_search(opts)?,
    ])
}

/// Suite errors as `check,trial,error` CSV lines, header included.
pub fn errors_csv(reports: &[CheckReport]) -> String {
    let mut out = String::from("check,trial,error\n");
    for r in reports {
        for (i, e) in r.errors.iter().enumerate() {
            out.push_str(&format!("{},{i},{e:e}\n", r.name));
        }
    }
    out
}
