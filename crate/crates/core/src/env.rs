//! Exactly solvable discrete environments.
//!
//! Completions are every token sequence of length `1..=max_length` over a
//! vocabulary of `vocab_size` tokens, so every partition function is a
//! finite sum. The environment owns the ground-truth reward table and the
//! prompt distribution; the KL-regularized optimum and objective are
//! evaluated by exact summation.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_index, Error, Result};
use crate::numerics::{logsumexp, seeded_rng};
use crate::policy::TabularPolicy;

/// Default cap on `vocab_size^max_length`.
pub const DEFAULT_ENUMERATION_CAP: usize = 4096;

/// Token sequence.
pub type Sequence = Vec<u32>;

/// Family of ground-truth reward functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    /// Independent standard normal entries, scaled.
    #[default]
    RandomNormal,
    /// Count of a prompt-specific target token minus a length penalty.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Multiplier for `random_normal`.
    pub scale: f64,
    /// Reward per occurrence of the target token (`feature`).
    pub target_weight: f64,
    /// Penalty per token of length (`feature`).
    pub length_penalty: f64,
    /// Bonus when the first token is the target token (`feature`).
    pub position_weight: f64,
    /// Standard deviation of seeded jitter added to `feature` rewards.
    pub jitter: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            target_weight: 1.0,
            length_penalty: 0.25,
            position_weight: 0.0,
            jitter: 0.0,
        }
    }
}

/// Serialized environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub prompt_count: usize,
    pub vocab_size: usize,
    pub max_length: usize,
    #[serde(default)]
    pub reward_family: RewardFamily,
    #[serde(default)]
    pub reward_params: RewardParams,
    /// Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSpec {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("EnvSpec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Dense, ordered table of every completion with its inverse index.
#[derive(Debug, Clone)]
pub struct CompletionTable {
    completions: Vec<Sequence>,
    index: HashMap<Sequence, usize>,
}

impl CompletionTable {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    pub fn sequence(&self, id: usize) -> Result<&[u32]> {
        check_index("completion", id, self.len())?;
        Ok(&self.completions[id])
    }

    pub fn id_of(&self, seq: &[u32]) -> Option<usize> {
        self.index.get(seq).copied()
    }

    pub fn length_of(&self, id: usize) -> Result<usize> {
        self.sequence(id).map(|s| s.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sequence> {
        self.completions.iter()
    }
}

/// Every sequence of length `1..=max_length` in lexicographic order
/// (a sequence precedes its extensions).
pub fn enumerate_completions(
    vocab_size: usize,
    max_length: usize,
    cap: usize,
) -> Result<CompletionTable> {
    if vocab_size == 0 || max_length == 0 {
        return Err(Error::ConfigInvalid(
            "vocab_size and max_length must be positive".into(),
        ));
    }
    let needed = (vocab_size as u128).checked_pow(max_length as u32).unwrap_or(u128::MAX);
    if needed > cap as u128 {
        return Err(Error::CapExceeded { needed, cap });
    }
    let mut completions = Vec::new();
    let mut prefix = Vec::with_capacity(max_length);
    push_extensions(&mut prefix, vocab_size as u32, max_length, &mut completions);
    if completions.len() < 2 {
        return Err(Error::ConfigInvalid(
            "environment must have at least two completions".into(),
        ));
    }
    let index = completions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    Ok(CompletionTable { completions, index })
}

fn push_extensions(prefix: &mut Sequence, vocab: u32, max_len: usize, out: &mut Vec<Sequence>) {
    if prefix.len() == max_len {
        return;
    }
    for t in 0..vocab {
        prefix.push(t);
        out.push(prefix.clone());
        push_extensions(prefix, vocab, max_len, out);
        prefix.pop();
    }
}

/// Environment with an enumerated completion space and tabulated rewards.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    prompt_weights: Vec<f64>,
    table: CompletionTable,
    rewards: Vec<f64>,
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        Self::with_cap(spec, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(spec: EnvSpec, cap: usize) -> Result<Self> {
        if spec.prompt_count == 0 {
            return Err(Error::ConfigInvalid("prompt_count must be positive".into()));
        }
        let table = enumerate_completions(spec.vocab_size, spec.max_length, cap)?;
        let prompt_weights = match &spec.prompt_weights {
            None => vec![1.0 / spec.prompt_count as f64; spec.prompt_count],
            Some(w) => {
                if w.len() != spec.prompt_count {
                    return Err(Error::ConfigInvalid(format!(
                        "prompt_weights has {} entries, expected {}",
                        w.len(),
                        spec.prompt_count
                    )));
                }
                if w.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::ConfigInvalid(
                        "prompt_weights must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::ConfigInvalid(format!(
                        "prompt_weights sum to {total}, expected 1"
                    )));
                }
                w.clone()
            }
        };
        let rewards = build_rewards(&spec, &table);
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward table".into()));
        }
        Ok(Self {
            spec,
            prompt_weights,
            table,
            rewards,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn prompt_count(&self) -> usize {
        self.spec.prompt_count
    }

    pub fn completion_count(&self) -> usize {
        self.table.len()
    }

    pub fn completions(&self) -> &CompletionTable {
        &self.table
    }

    pub fn prompt_weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    pub fn true_reward(&self, x: usize, y: usize) -> Result<f64> {
        check_index("prompt", x, self.prompt_count())?;
        check_index("completion", y, self.completion_count())?;
        Ok(self.rewards[x * self.completion_count() + y])
    }

    /// Reward row for prompt `x`.
    pub fn reward_row(&self, x: usize) -> &[f64] {
        let c = self.completion_count();
        &self.rewards[x * c..(x + 1) * c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prompt_count(), self.completion_count())
    }
}

fn build_rewards(spec: &EnvSpec, table: &CompletionTable) -> Vec<f64> {
    let p = &spec.reward_params;
    let mut rng = seeded_rng(spec.seed);
    let n = spec.prompt_count * table.len();
    match spec.reward_family {
        RewardFamily::RandomNormal => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.scale * z
            })
            .collect(),
        RewardFamily::Feature => {
            let mut out = Vec::with_capacity(n);
            for x in 0..spec.prompt_count {
                let target = (x % spec.vocab_size) as u32;
                for seq in table.iter() {
                    let count = seq.iter().filter(|&&t| t == target).count() as f64;
                    let first = if seq[0] == target { 1.0 } else { 0.0 };
                    let jitter = if p.jitter > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p.jitter * z
                    } else {
                        0.0
                    };
                    out.push(
                        p.target_weight * count - p.length_penalty * seq.len() as f64
                            + p.position_weight * first
                            + jitter,
                    );
                }
            }
            out
        }
    }
}

/// `π*(y|x) ∝ π_ref(y|x) exp(r(x,y)/β)`, normalized per prompt in log space.
pub fn optimal_policy(env: &Environment, reference: &TabularPolicy, beta: f64) -> Result<TabularPolicy> {
    check_shape(env, reference)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let (rows, cols) = env.shape();
    let mut logits = Vec::with_capacity(rows * cols);
    for x in 0..rows {
        let lr = reference.row_logp(x);
        for (y, r) in env.reward_row(x).iter().enumerate() {
            logits.push(lr[y] + r / beta);
        }
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("optimal policy logits".into()));
    }
    let pol = TabularPolicy::from_logits(rows, cols, logits)?;
    for x in 0..rows {
        if !pol.row_lse(x).is_finite() {
            return Err(Error::NonFinite(format!("optimal policy normalizer at prompt {x}")));
        }
    }
    Ok(pol)
}

/// `E_{x~ρ, y~π}[r] − β E_{x~ρ}[KL(π‖π_ref)]` by exact summation.
pub fn rlhf_objective(
    env: &Environment,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
) -> Result<f64> {
    check_shape(env, policy)?;
    check_shape(env, reference)?;
    let mut total = 0.0;
    for (x, rho) in env.prompt_weights().iter().enumerate() {
        let lp = policy.row_logp(x);
        let lr = reference.row_logp(x);
        let rewards = env.reward_row(x);
        let mut row = 0.0;
        for y in 0..lp.len() {
            let p = lp[y].exp();
            if p > 0.0 {
                row += p * (rewards[y] - beta * (lp[y] - lr[y]));
            }
        }
        total += rho * row;
    }
    Ok(total)
}

/// `E_{x~ρ, y~π}[r(x, y)]`.
pub fn expected_reward(env: &Environment, policy: &TabularPolicy) -> Result<f64> {
    check_shape(env, policy)?;
    let mut total = 0.0;
    for (x, rho) in env.prompt_weights().iter().enumerate() {
        let lp = policy.row_logp(x);
        let row: f64 = lp
            .iter()
            .zip(env.reward_row(x))
            .map(|(l, r)| l.exp() * r)
            .sum();
        total += rho * row;
    }
    Ok(total)
}

pub(crate) fn check_shape(env: &Environment, policy: &TabularPolicy) -> Result<()> {
    if env.shape() != policy.shape() {
        return Err(Error::ShapeMismatch {
            expected: env.shape(),
            got: policy.shape(),
        });
    }
    Ok(())
}

/// Log-normalizer of `π_ref exp(r/β)` for prompt `x`.
pub fn optimal_log_partition(env: &Environment, reference: &TabularPolicy, beta: f64, x: usize) -> f64 {
    let lr = reference.row_logp(x);
    let v: Vec<f64> = env
        .reward_row(x)
        .iter()
        .zip(&lr)
        .map(|(r, l)| l + r / beta)
        .collect();
    logsumexp(&v)
}
