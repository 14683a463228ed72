//! Exact tabular softmax policy.
//!
//! Every conditioning context `(prompt, prefix)` owns an independent vector of
//! `vocab_size` logits. States are materialized lazily with all-zero logits,
//! i.e. the uniform distribution, on first visit. All probability math runs in
//! the log domain with max-subtracted log-sum-exp.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Token = usize;

/// Conditioning context of one token decision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId {
    pub prompt_id: usize,
    pub prefix: Vec<Token>,
}

impl StateId {
    pub fn new(prompt_id: usize, prefix: Vec<Token>) -> Self {
        Self { prompt_id, prefix }
    }

    pub fn root(prompt_id: usize) -> Self {
        Self::new(prompt_id, Vec::new())
    }

    /// The state reached after emitting `token` here.
    pub fn extend(&self, token: Token) -> Self {
        let mut prefix = Vec::with_capacity(self.prefix.len() + 1);
        prefix.extend_from_slice(&self.prefix);
        prefix.push(token);
        Self::new(self.prompt_id, prefix)
    }

    pub fn depth(&self) -> usize {
        self.prefix.len()
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}; [", self.prompt_id)?;
        for (i, t) in self.prefix.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        f.write_str("])")
    }
}

/// How contexts map onto logit vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterSharing {
    /// One logit vector per full `(prompt, prefix)` context.
    #[default]
    Prefix,
    /// One logit vector per `(prompt, position)`; prefixes of equal length share
    /// parameters. Canonical keys carry an all-zero prefix of that length.
    Position,
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of the softmax of `logits`.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    let h: f64 = lp
        .iter()
        .map(|&l| {
            let p = l.exp();
            if p > 0.0 {
                -p * l
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Per-logit partial derivatives keyed like a [`PolicyTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    vocab_size: usize,
    entries: BTreeMap<StateId, Vec<f64>>,
}

impl GradientTable {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Mutable access to a state's row, created as zeros if absent.
    pub fn row_mut(&mut self, state: &StateId) -> &mut [f64] {
        if !self.entries.contains_key(state) {
            self.entries.insert(state.clone(), vec![0.0; self.vocab_size]);
        }
        self.entries.get_mut(state).expect("row just inserted")
    }

    pub fn get(&self, state: &StateId) -> Option<&[f64]> {
        self.entries.get(state).map(Vec::as_slice)
    }

    pub fn insert(&mut self, state: StateId, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab_size {
            return Err(invalid(
                "gradient row",
                format!("expected {} entries, got {}", self.vocab_size, row.len()),
            ));
        }
        self.entries.insert(state, row);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateId, &[f64])> {
        self.entries.iter().map(|(s, g)| (s, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm over every stored entry.
    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab_size: usize,
    sharing: ParameterSharing,
    version: u64,
    logits: BTreeMap<StateId, Vec<f64>>,
    init: Vec<f64>,
}

impl PolicyTable {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(invalid("vocab_size", "must be positive"));
        }
        Ok(Self {
            vocab_size,
            sharing: ParameterSharing::Prefix,
            version: 0,
            logits: BTreeMap::new(),
            init: vec![0.0; vocab_size],
        })
    }

    pub fn with_sharing(mut self, sharing: ParameterSharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sharing(&self) -> ParameterSharing {
        self.sharing
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &StateId> {
        self.logits.keys()
    }

    /// The key under which `state`'s logits are stored.
    pub fn key<'a>(&self, state: &'a StateId) -> Cow<'a, StateId> {
        match self.sharing {
            ParameterSharing::Prefix => Cow::Borrowed(state),
            ParameterSharing::Position => Cow::Owned(StateId::new(state.prompt_id, vec![0; state.prefix.len()])),
        }
    }

    pub fn contains(&self, state: &StateId) -> bool {
        self.logits.contains_key(&self.key(state))
    }

    /// Inserts the uniform initialization for `state` if it is not yet stored.
    pub fn materialize(&mut self, state: &StateId) {
        let key = self.key(state).into_owned();
        self.logits.entry(key).or_insert_with(|| vec![0.0; self.vocab_size]);
    }

    pub fn logits(&self, state: &StateId) -> Result<&[f64]> {
        self.logits
            .get(&self.key(state))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingState(state.clone()))
    }

    /// Stored logits, or the lazy zero initialization for unvisited states.
    pub fn logits_or_init(&self, state: &StateId) -> &[f64] {
        self.logits
            .get(&self.key(state))
            .map(Vec::as_slice)
            .unwrap_or(&self.init)
    }

    pub fn set_logits(&mut self, state: &StateId, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(invalid(
                "logits",
                format!("expected {} entries, got {}", self.vocab_size, logits.len()),
            ));
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(invalid("logits", format!("entry {i} of state {state} is not finite")));
        }
        let key = self.key(state).into_owned();
        self.logits.insert(key, logits);
        Ok(())
    }

    fn check_token(&self, token: Token) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn log_probs(&self, state: &StateId) -> Result<Vec<f64>> {
        Ok(log_softmax(self.logits(state)?))
    }

    pub fn probs(&self, state: &StateId) -> Result<Vec<f64>> {
        Ok(softmax(self.logits(state)?))
    }

    /// `log softmax(logits[state])[token]`.
    pub fn log_prob(&self, state: &StateId, token: Token) -> Result<f64> {
        self.check_token(token)?;
        Ok(self.log_probs(state)?[token])
    }

    pub fn state_entropy(&self, state: &StateId) -> Result<f64> {
        Ok(entropy_of_logits(self.logits(state)?))
    }

    /// Inverse-CDF draw from the state's softmax, treating unvisited states as
    /// uniform.
    pub fn sample_token<R: Rng + ?Sized>(&self, state: &StateId, rng: &mut R) -> Token {
        let probs = softmax(self.logits_or_init(state));
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = k;
            }
            acc += p;
            if u < acc {
                return k;
            }
        }
        last_positive
    }

    /// Gradient of `log pi(token | state)` with respect to the state's logits:
    /// entry `y` is `1{y = token} - pi(y)`.
    pub fn log_prob_gradient(&self, state: &StateId, token: Token) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let mut g: Vec<f64> = self.probs(state)?.into_iter().map(|p| -p).collect();
        g[token] += 1.0;
        Ok(g)
    }

    /// Gradient ascent: `logits[s] += learning_rate * grad[s]` for every state
    /// in `grad`, then bumps the version. The table is left untouched if any
    /// entry is rejected.
    pub fn apply_gradient(&mut self, grad: &GradientTable, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid(
                "learning_rate",
                format!("must be positive and finite, got {learning_rate}"),
            ));
        }
        if grad.vocab_size() != self.vocab_size {
            return Err(invalid(
                "gradient",
                format!(
                    "vocabulary size {} does not match policy size {}",
                    grad.vocab_size(),
                    self.vocab_size
                ),
            ));
        }
        for (state, g) in grad.iter() {
            if let Some(token) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    state: state.clone(),
                    token,
                });
            }
            if !self.contains(state) {
                return Err(Error::MissingState(state.clone()));
            }
        }
        for (state, g) in grad.iter() {
            let key = self.key(state).into_owned();
            let row = self.logits.get_mut(&key).expect("checked above");
            for (z, d) in row.iter_mut().zip(g) {
                *z += learning_rate * d;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Subtracts each state's maximum logit. Probabilities are unchanged.
    pub fn recenter(&mut self) {
        for row in self.logits.values_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for z in row.iter_mut() {
                *z -= max;
            }
        }
    }

    /// Flat text snapshot: a `#` header, then one `prompt_id;prefix_csv;logit_csv`
    /// line per stored state in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vocab_size={} version={}", self.vocab_size, self.version);
        for (state, logits) in &self.logits {
            let prefix: Vec<String> = state.prefix.iter().map(|t| t.to_string()).collect();
            let zs: Vec<String> = logits.iter().map(|z| format!("{z:?}")).collect();
            let _ = writeln!(out, "{};{};{}", state.prompt_id, prefix.join(","), zs.join(","));
        }
        out
    }

    /// Parses [`PolicyTable::to_text`] output. Without a header the vocabulary
    /// size is taken from the first line and the version starts at 0.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab_size = None;
        let mut version = 0;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    match field.split_once('=') {
                        Some(("vocab_size", v)) => vocab_size = Some(parse_num(v, line_no)?),
                        Some(("version", v)) => version = parse_num(v, line_no)?,
                        _ => {}
                    }
                }
                continue;
            }
            let parts: Vec<&str> = line.split(';').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("expected 3 ';'-separated fields, got {}", parts.len()),
                });
            }
            let prompt_id = parse_num(parts[0], line_no)?;
            let prefix = if parts[1].is_empty() {
                Vec::new()
            } else {
                parts[1]
                    .split(',')
                    .map(|t| parse_num(t, line_no))
                    .collect::<Result<Vec<usize>>>()?
            };
            let logits = parts[2]
                .split(',')
                .map(|z| {
                    z.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: line_no,
                        reason: format!("bad logit {z:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((line_no, StateId::new(prompt_id, prefix), logits));
        }
        let vocab_size = match vocab_size {
            Some(v) => v,
            None => rows.first().map(|r| r.2.len()).ok_or_else(|| Error::Parse {
                line: 0,
                reason: "empty snapshot without a vocab_size header".into(),
            })?,
        };
        let mut table = PolicyTable::new(vocab_size)?;
        table.version = version;
        for (line, state, logits) in rows {
            if let Some(&t) = state.prefix.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Parse {
                    line,
                    reason: format!("prefix token {t} out of range"),
                });
            }
            table.set_logits(&state, logits).map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(table)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| Error::Parse {
        line,
        reason: format!("bad integer {s:?}: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_with(logits: &[f64]) -> (PolicyTable, StateId) {
        let mut t = PolicyTable::new(logits.len()).unwrap();
        let s = StateId::root(0);
        t.set_logits(&s, logits.to_vec()).unwrap();
        (t, s)
    }

    /// Neumaier-compensated log-sum-exp, written independently of `log_softmax`.
    fn oracle_log_prob(logits: &[f64], token: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &z in logits {
            let x = (z - max).exp();
            let t = sum + x;
            if sum.abs() >= x.abs() {
                comp += (sum - t) + x;
            } else {
                comp += (x - t) + sum;
            }
            sum = t;
        }
        logits[token] - max - (sum + comp).ln()
    }

    #[test]
    fn log_prob_uniform() {
        let (t, s) = table_with(&[0.0; 4]);
        assert!((t.log_prob(&s, 2).unwrap() - (0.25f64).ln()).abs() < 1e-15);
        assert!((t.log_prob(&s, 2).unwrap() + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn log_prob_saturated() {
        let (t, s) = table_with(&[1000.0, 0.0]);
        assert!(t.log_prob(&s, 0).unwrap().abs() < 1e-9);
        assert!(t.log_prob(&s, 1).unwrap().is_finite());
    }

    #[test]
    fn log_prob_matches_compensated_oracle() {
        let z = [0.3, -1.2, 2.0];
        let (t, s) = table_with(&z);
        let expected = oracle_log_prob(&z, 1);
        assert!((t.log_prob(&s, 1).unwrap() - expected).abs() < 1e-14);
        assert!(t.log_prob(&s, 1).unwrap() <= 0.0);
    }

    #[test]
    fn log_prob_errors() {
        let (t, s) = table_with(&[0.0; 3]);
        assert_eq!(
            t.log_prob(&s, 3),
            Err(Error::TokenOutOfRange {
                token: 3,
                vocab_size: 3
            })
        );
        let missing = StateId::new(1, vec![0]);
        assert_eq!(t.log_prob(&missing, 0), Err(Error::MissingState(missing)));
    }

    #[test]
    fn entropy_examples() {
        let (t, s) = table_with(&[0.0; 4]);
        assert!((t.state_entropy(&s).unwrap() - 4f64.ln()).abs() < 1e-14);
        let (t, s) = table_with(&[800.0, 0.0, 0.0]);
        assert!(t.state_entropy(&s).unwrap() < 1e-12);
        let z = [1.0, 2.0, 3.0];
        let (t, s) = table_with(&z);
        let e: Vec<f64> = z.iter().map(|x: &f64| x.exp()).collect();
        let zsum: f64 = e.iter().sum();
        let oracle: f64 = e.iter().map(|x| -(x / zsum) * (x / zsum).ln()).sum();
        assert!((t.state_entropy(&s).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn sampling_saturated_and_deterministic() {
        let (t, s) = table_with(&[1000.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(t.sample_token(&s, &mut rng), 0);
        }
        let (t, s) = table_with(&[0.1, 0.5, -0.3, 0.0]);
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            (0..50).map(|_| t.sample_token(&s, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            (0..50).map(|_| t.sample_token(&s, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies_within_four_sigma() {
        let v = 5;
        let (t, s) = table_with(&vec![0.0; v]);
        let n = 100_000;
        let mut counts = vec![0usize; v];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..n {
            counts[t.sample_token(&s, &mut rng)] += 1;
        }
        let p = 1.0 / v as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn apply_gradient_examples() {
        let (mut t, s) = table_with(&[0.0; 4]);
        let mut g = GradientTable::new(4);
        g.row_mut(&s);
        t.apply_gradient(&g, 0.5).unwrap();
        assert_eq!(t.logits(&s).unwrap(), &[0.0; 4]);
        assert_eq!(t.version(), 1);

        g.row_mut(&s)[2] = 1.0;
        t.apply_gradient(&g, 0.1).unwrap();
        assert_eq!(t.logits(&s).unwrap(), &[0.0, 0.0, 0.1, 0.0]);
        assert_eq!(t.version(), 2);
    }

    #[test]
    fn apply_gradient_rejects_non_finite_and_keeps_table() {
        let (mut t, s) = table_with(&[0.0; 3]);
        let other = StateId::new(0, vec![1]);
        t.materialize(&other);
        let before = t.clone();
        let mut g = GradientTable::new(3);
        g.row_mut(&s)[0] = 1.0;
        g.row_mut(&other)[1] = f64::NAN;
        let err = t.apply_gradient(&g, 0.1).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { state: other, token: 1 });
        assert_eq!(t, before);
        assert!(t.apply_gradient(&GradientTable::new(3), 0.0).is_err());
    }

    #[test]
    fn untouched_states_unchanged() {
        let (mut t, s) = table_with(&[0.2, 0.1, -0.4]);
        let other = StateId::new(3, vec![2, 1]);
        t.set_logits(&other, vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = GradientTable::new(3);
        g.row_mut(&s).copy_from_slice(&[1.0, -1.0, 0.5]);
        t.apply_gradient(&g, 0.3).unwrap();
        assert_eq!(t.logits(&other).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_derivative_examples() {
        let (t, s) = table_with(&[0.0; 4]);
        assert_eq!(t.log_prob_gradient(&s, 2).unwrap(), vec![-0.25, -0.25, 0.75, -0.25]);
        let (t, s) = table_with(&[900.0, 0.0, 0.0]);
        let g = t.log_prob_gradient(&s, 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn position_sharing_aliases_prefixes() {
        let mut t = PolicyTable::new(3).unwrap().with_sharing(ParameterSharing::Position);
        let a = StateId::new(0, vec![1, 2]);
        let b = StateId::new(0, vec![0, 1]);
        t.set_logits(&a, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.logits(&b).unwrap(), &[1.0, 0.0, 0.0]);
        assert!(!t.contains(&StateId::new(0, vec![1])));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn text_snapshot_round_trip() {
        let mut t = PolicyTable::new(3).unwrap();
        t.set_logits(&StateId::root(0), vec![0.1, -2.5, 1e-300]).unwrap();
        t.set_logits(&StateId::new(2, vec![1, 0]), vec![3.0, 0.0, -0.3333333333333333])
            .unwrap();
        let text = t.to_text();
        assert!(text.contains("0;;0.1,-2.5,1e-300"));
        assert!(text.contains("2;1,0;3.0,0.0,-0.3333333333333333"));
        assert_eq!(PolicyTable::from_text(&text).unwrap(), t);
    }

    #[test]
    fn text_snapshot_errors_carry_line() {
        let err = PolicyTable::from_text("0;;0,0\n1;x;0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = PolicyTable::from_text("0;;0,0\n1;;0,0,0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 2..9),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounded(z in prop::collection::vec(-50.0f64..50.0, 2..9)) {
            let h = entropy_of_logits(&z);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (z.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn recenter_preserves_probabilities(z in prop::collection::vec(-20.0f64..20.0, 2..7)) {
            let (mut t, s) = table_with(&z);
            let before = t.probs(&s).unwrap();
            t.recenter();
            for (a, b) in before.iter().zip(t.probs(&s).unwrap()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(t.logits(&s).unwrap().iter().cloned().fold(f64::MIN, f64::max), 0.0);
        }
    }
}
