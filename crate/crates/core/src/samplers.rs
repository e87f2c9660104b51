//! Negative selection over a per-prompt candidate pool: the single-step MC
//! kernel and its max, min and uniform-random variants.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{check_index, Error, Result};
use crate::numerics::{sample_without_replacement, seeded_rng, softmax};
use crate::policy::ImplicitReward;

/// A prompt, its preferred completion `y_0` and `L` further candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub x: usize,
    pub preferred: usize,
    pub candidates: Vec<usize>,
    /// Marks candidates built by corrupting the preferred completion.
    #[serde(default)]
    pub noise: Vec<bool>,
}

impl CandidateSet {
    pub fn new(x: usize, preferred: usize, candidates: Vec<usize>) -> Self {
        let noise = vec![false; candidates.len()];
        Self {
            x,
            preferred,
            candidates,
            noise,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn is_noise(&self, position: usize) -> bool {
        self.noise.get(position).copied().unwrap_or(false)
    }

    fn validate(&self, cols: usize) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::NotEnoughCandidates {
                needed: 1,
                available: 0,
            });
        }
        check_index("completion", self.preferred, cols)?;
        for &y in &self.candidates {
            check_index("completion", y, cols)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Mc,
    Max,
    Min,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Strategy::Mc),
            "max" => Ok(Strategy::Max),
            "min" => Ok(Strategy::Min),
            "random" => Ok(Strategy::Random),
            other => Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Mc => "mc",
            Strategy::Max => "max",
            Strategy::Min => "min",
            Strategy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_beta() -> f64 {
    crate::losses::DEFAULT_BETA
}

fn default_draws() -> usize {
    1
}

impl SamplerSpec {
    pub fn new(strategy: Strategy, beta: f64, draws: usize, rng_seed: u64) -> Self {
        Self {
            strategy,
            beta,
            draws,
            rng_seed,
        }
    }
}

/// Softmax of `β r_θ` over `{y_0} ∪ candidates`; index 0 is the preferred
/// completion.
pub fn kernel_weights(ir: &ImplicitReward, cs: &CandidateSet, beta: f64) -> Result<Vec<f64>> {
    cs.validate(ir.shape().1)?;
    let logits = std::iter::once(cs.preferred)
        .chain(cs.candidates.iter().copied())
        .map(|y| Ok(beta * ir.reward(cs.x, y)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logits))
}

/// Positions (into `cs.candidates`) of the selected negatives, in selection
/// order.
pub fn select_negative_positions(
    ir: &ImplicitReward,
    cs: &CandidateSet,
    spec: &SamplerSpec,
) -> Result<Vec<usize>> {
    cs.validate(ir.shape().1)?;
    if spec.draws == 0 {
        return Err(Error::EmptyNegatives);
    }
    if spec.draws > cs.len() {
        return Err(Error::NotEnoughCandidates {
            needed: spec.draws,
            available: cs.len(),
        });
    }
    let rewards = ir.rewards(cs.x, &cs.candidates)?;
    let m = spec.draws;
    let picked = match spec.strategy {
        Strategy::Mc => {
            let logits: Vec<f64> = rewards.iter().map(|r| spec.beta * r).collect();
            let mut rng = seeded_rng(spec.rng_seed);
            sample_without_replacement(&logits, m, &mut rng)
        }
        Strategy::Random => {
            let mut rng = seeded_rng(spec.rng_seed);
            sample_without_replacement(&vec![0.0; cs.len()], m, &mut rng)
        }
        Strategy::Max | Strategy::Min => {
            let mut order: Vec<usize> = (0..cs.len()).collect();
            let descending = spec.strategy == Strategy::Max;
            order.sort_by(|&a, &b| {
                let c = rewards[a].total_cmp(&rewards[b]);
                let c = if descending { c.reverse() } else { c };
                c.then(a.cmp(&b))
            });
            order.truncate(m);
            order
        }
    };
    Ok(picked)
}

/// Completion ids of the selected negatives (length `spec.draws`).
pub fn select_negatives(ir: &ImplicitReward, cs: &CandidateSet, spec: &SamplerSpec) -> Result<Vec<usize>> {
    Ok(select_negative_positions(ir, cs, spec)?
        .into_iter()
        .map(|p| cs.candidates[p])
        .collect())
}

/// Pearson χ² goodness-of-fit of observed counts against probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub counts: Vec<u64>,
    pub expected: Vec<f64>,
}

pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> Result<ChiSquareTest> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(Error::InvalidArgument(
            "χ² test needs matching count and probability vectors of length ≥ 2".into(),
        ));
    }
    let n: u64 = counts.iter().sum();
    let expected: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let statistic = counts
        .iter()
        .zip(&expected)
        .filter(|(_, e)| **e > 0.0)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum::<f64>();
    let dof = expected.iter().filter(|e| **e > 0.0).count() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
        counts: counts.to_vec(),
        expected,
    })
}

/// Runs `n` single-draw MC selections with seeds `base_seed, base_seed + 1,
/// ...` and tests the position frequencies against the kernel weights
/// renormalized over the candidate pool.
pub fn kernel_frequency_test(
    ir: &ImplicitReward,
    cs: &CandidateSet,
    beta: f64,
    n: usize,
    base_seed: u64,
) -> Result<ChiSquareTest> {
    let w = kernel_weights(ir, cs, beta)?;
    let pool: f64 = w[1..].iter().sum();
    let probs: Vec<f64> = w[1..].iter().map(|v| v / pool).collect();
    let mut counts = vec![0u64; cs.len()];
    for i in 0..n {
        let spec = SamplerSpec::new(Strategy::Mc, beta, 1, base_seed.wrapping_add(i as u64));
        counts[select_negative_positions(ir, cs, &spec)?[0]] += 1;
    }
    chi_square_test(&counts, &probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use crate::policy::TabularPolicy;
    use proptest::prelude::*;

    /// Uniform reference over `cols`, target logits chosen so that the
    /// implicit rewards equal `r` up to a common shift.
    fn with_rewards(r: &[f64]) -> (TabularPolicy, TabularPolicy) {
        let reference = TabularPolicy::uniform(1, r.len());
        let target = TabularPolicy::from_logits(1, r.len(), r.to_vec()).unwrap();
        (target, reference)
    }

    #[test]
    fn kernel_weight_hand_values() {
        let (t, r) = with_rewards(&[0.0, 3f64.ln()]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let w = kernel_weights(&ir, &CandidateSet::new(0, 0, vec![1]), 1.0).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);

        let w = kernel_weights(&ir, &CandidateSet::new(0, 0, vec![1, 1, 0]), 1e-12).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn kernel_weights_ignore_reward_shift() {
        let base = [0.2, -1.0, 0.7, 2.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 4.5).collect();
        let a = softmax(&base);
        let b = softmax(&shifted);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn max_and_min_pick_extremes() {
        let (t, r) = with_rewards(&[0.0, 5.0, 1.0]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 1, vec![0, 1, 2]);
        let top = select_negatives(&ir, &cs, &SamplerSpec::new(Strategy::Max, 1.0, 1, 0)).unwrap();
        assert_eq!(top, vec![1]);
        let mut bottom = select_negatives(&ir, &cs, &SamplerSpec::new(Strategy::Min, 1.0, 2, 0)).unwrap();
        bottom.sort();
        assert_eq!(bottom, vec![0, 2]);
    }

    #[test]
    fn ties_resolve_by_position() {
        let (t, r) = with_rewards(&[0.0; 4]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 0, vec![3, 2, 1]);
        for s in [Strategy::Max, Strategy::Min] {
            let p = select_negative_positions(&ir, &cs, &SamplerSpec::new(s, 1.0, 2, 0)).unwrap();
            assert_eq!(p, vec![0, 1]);
        }
    }

    #[test]
    fn errors() {
        let (t, r) = with_rewards(&[0.0; 4]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 0, vec![1, 2]);
        assert!(matches!(
            select_negatives(&ir, &cs, &SamplerSpec::new(Strategy::Mc, 1.0, 3, 0)),
            Err(Error::NotEnoughCandidates { needed: 3, available: 2 })
        ));
        let zero = TabularPolicy::from_logits(1, 4, vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
        let ir = ImplicitReward::new(&t, &zero).unwrap();
        assert!(matches!(
            kernel_weights(&ir, &cs, 1.0),
            Err(Error::UnsupportedPoint { x: 0, y: 1 })
        ));
    }

    #[test]
    fn mc_is_replayable_and_without_replacement() {
        let t = TabularPolicy::random(1, 12, 1.0, 3);
        let r = TabularPolicy::random(1, 12, 1.0, 4);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 0, (1..12).collect());
        let spec = SamplerSpec::new(Strategy::Mc, 1.0, 5, 77);
        let a = select_negative_positions(&ir, &cs, &spec).unwrap();
        assert_eq!(a, select_negative_positions(&ir, &cs, &spec).unwrap());
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5);
    }

    #[test]
    fn mc_uniform_frequencies() {
        let (t, r) = with_rewards(&[0.0; 5]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 0, vec![1, 2, 3, 4]);
        let test = kernel_frequency_test(&ir, &cs, 1.0, 100_000, 11).unwrap();
        let n = 100_000.0;
        let sigma = (n * 0.25 * 0.75f64).sqrt();
        for c in &test.counts {
            assert!((*c as f64 - n / 4.0).abs() < 3.0 * sigma, "{:?}", test.counts);
        }
    }

    #[test]
    fn mc_two_candidate_frequency() {
        let (t, r) = with_rewards(&[0.0, 0.0, 3f64.ln()]);
        let ir = ImplicitReward::new(&t, &r).unwrap();
        let cs = CandidateSet::new(0, 0, vec![1, 2]);
        let test = kernel_frequency_test(&ir, &cs, 1.0, 100_000, 5).unwrap();
        let f = test.counts[1] as f64 / 1e5;
        let sigma = (0.75 * 0.25 / 1e5f64).sqrt();
        assert!((f - 0.75).abs() < 3.0 * sigma, "{f}");
    }

    #[test]
    fn chi_square_hand_case() {
        let t = chi_square_test(&[50, 50], &[0.5, 0.5]).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        // statistic 4 on one degree of freedom → p ≈ 0.0455
        let t = chi_square_test(&[60, 40], &[0.5, 0.5]).unwrap();
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert!((t.p_value - 0.045_500_263_896).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn weights_are_permutation_equivariant(seed in 0u64..500, rot in 1usize..6) {
            let t = TabularPolicy::random(1, 7, 1.5, seed);
            let r = TabularPolicy::random(1, 7, 1.5, seed + 1000);
            let ir = ImplicitReward::new(&t, &r).unwrap();
            let cands: Vec<usize> = (1..7).collect();
            let mut rotated = cands.clone();
            rotated.rotate_left(rot);
            let w = kernel_weights(&ir, &CandidateSet::new(0, 0, cands), 0.8).unwrap();
            let wr = kernel_weights(&ir, &CandidateSet::new(0, 0, rotated), 0.8).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((w[0] - wr[0]).abs() < 1e-15);
            for i in 0..6 {
                prop_assert!((w[1 + (i + rot) % 6] - wr[1 + i]).abs() < 1e-15);
            }
        }

        #[test]
        fn max_min_invariant_to_beta(seed in 0u64..500, beta in 0.01f64..10.0, m in 1usize..5) {
            let t = TabularPolicy::random(1, 8, 2.0, seed);
            let r = TabularPolicy::random(1, 8, 1.0, seed + 1);
            let ir = ImplicitReward::new(&t, &r).unwrap();
            let ir2 = ir;
            let cs = CandidateSet::new(0, 0, (1..8).collect());
            for s in [Strategy::Max, Strategy::Min] {
                let mut a = select_negatives(&ir, &cs, &SamplerSpec::new(s, 1.0, m, 0)).unwrap();
                let mut b = select_negatives(&ir2, &cs, &SamplerSpec::new(s, beta, m, 9)).unwrap();
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }
    }
}
