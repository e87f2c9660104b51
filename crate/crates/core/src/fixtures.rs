//! Named environments shared by the CLI defaults, the verification pass and
//! the trend experiments.

use serde::{Deserialize, Serialize};

use crate::env::{optimal_policy, EnvSpec, Environment, RewardFamily, RewardParams};
use crate::error::Result;
use crate::losses::{LossName, LossSpec};
use crate::partition::Proposal;
use crate::policy::TabularPolicy;
use crate::samplers::Strategy;
use crate::training::{NoiseSpec, TrainConfig, TrainContext};

/// Loss and kernel temperature used by the trend experiments. At the
/// library default of 0.01 the kernel over a tabular policy is almost flat.
pub const TREND_BETA: f64 = 1.0;
pub const TREND_LR: f64 = 1.0;
pub const STANDARD_CANDIDATES: usize = 4;
pub const STANDARD_RECORDS: usize = 512;
pub const NOISE_CANDIDATES: usize = 6;
pub const NOISE_EPOCHS: usize = 6;

/// How the reference policy is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Uniform,
    /// Logits drawn as `scale · N(0, 1)`.
    Random { scale: f64, seed: u64 },
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Random { scale: 0.5, seed: 1 }
    }
}

impl ReferenceSpec {
    pub fn build(&self, rows: usize, cols: usize) -> TabularPolicy {
        match *self {
            ReferenceSpec::Uniform => TabularPolicy::uniform(rows, cols),
            ReferenceSpec::Random { scale, seed } => TabularPolicy::random(rows, cols, scale, seed),
        }
    }
}

/// Environment, reference policy and proposal `μ = π_ref`.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub env: Environment,
    pub reference: TabularPolicy,
    pub proposal: Proposal,
    pub beta_star: f64,
}

impl Fixture {
    pub fn new(spec: EnvSpec, reference: ReferenceSpec, beta_star: f64) -> Result<Self> {
        let env = Environment::new(spec)?;
        let (rows, cols) = env.shape();
        let reference = reference.build(rows, cols);
        let proposal = Proposal::reference(&reference)?;
        Ok(Self {
            env,
            reference,
            proposal,
            beta_star,
        })
    }

    pub fn context(&self) -> TrainContext<'_> {
        TrainContext {
            env: &self.env,
            reference: &self.reference,
            proposal: &self.proposal,
            beta_star: self.beta_star,
        }
    }

    pub fn optimal(&self) -> Result<TabularPolicy> {
        optimal_policy(&self.env, &self.reference, self.beta_star)
    }
}

fn random_normal(vocab_size: usize, max_length: usize, scale: f64) -> EnvSpec {
    EnvSpec {
        prompt_count: 2,
        vocab_size,
        max_length,
        reward_family: RewardFamily::RandomNormal,
        reward_params: RewardParams {
            scale,
            ..Default::default()
        },
        prompt_weights: None,
        seed: 3,
    }
}

/// Two prompts over the six completions of length ≤ 2 on a binary vocabulary.
pub fn standard_spec() -> EnvSpec {
    random_normal(2, 2, 2.5)
}

/// Four tokens and length ≤ 2, so most preferred completions have a
/// distinct transposition to serve as noise.
pub fn noise_spec() -> EnvSpec {
    random_normal(4, 2, 3.0)
}

/// Twelve completions scored by target-token counts with positional bonus.
pub fn feature_spec() -> EnvSpec {
    EnvSpec {
        prompt_count: 2,
        vocab_size: 3,
        max_length: 2,
        reward_family: RewardFamily::Feature,
        reward_params: RewardParams {
            position_weight: 0.5,
            jitter: 0.1,
            ..Default::default()
        },
        prompt_weights: Some(vec![0.4, 0.6]),
        seed: 11,
    }
}

pub fn standard() -> Fixture {
    Fixture::new(standard_spec(), ReferenceSpec::default(), 1.0).expect("standard fixture is valid")
}

pub fn noise() -> Fixture {
    Fixture::new(noise_spec(), ReferenceSpec::default(), 1.0).expect("noise fixture is valid")
}

pub fn feature() -> Fixture {
    Fixture::new(feature_spec(), ReferenceSpec::default(), 1.0).expect("feature fixture is valid")
}

/// Trainer settings for the trend experiments.
pub fn trend_config(loss: LossName, strategy: Strategy, m: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(LossSpec::new(loss).with_beta(TREND_BETA).with_m(m), TREND_LR);
    cfg.sampler.strategy = strategy;
    cfg.sampler.beta = TREND_BETA;
    cfg.seed = seed;
    cfg.online_settings.candidates = STANDARD_CANDIDATES;
    cfg.online_settings.records = STANDARD_RECORDS;
    cfg
}

pub fn noise_injection() -> NoiseSpec {
    NoiseSpec {
        enabled: true,
        swap_count: 1,
    }
}
