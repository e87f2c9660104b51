//! Ranked-candidate preference records and their synthetic generator.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, sample_without_replacement, seeded_rng, Categorical};
use crate::partition::Proposal;
use crate::samplers::CandidateSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub y: usize,
    pub rank: usize,
    #[serde(default)]
    pub noise: bool,
}

/// One prompt with its ranked candidates; `preferred` is the completion id
/// of the rank-1 candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub x: usize,
    pub preferred: usize,
    pub candidates: Vec<RankedCandidate>,
    /// Set when noise was requested but the preferred sequence has no two
    /// distinct tokens to swap; such records carry no noise candidate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate_noise: bool,
}

impl PreferenceRecord {
    /// Position of the rank-1 candidate.
    pub fn preferred_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.rank == 1)
    }

    /// Checks dense ranks from 1 and that `preferred` is the rank-1 entry.
    pub fn validate(&self, completion_count: usize) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "record for prompt {} has {} candidates, need at least 2",
                self.x,
                self.candidates.len()
            )));
        }
        let mut ranks: Vec<usize> = self.candidates.iter().map(|c| c.rank).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| r != i + 1) {
            return Err(Error::InvalidArgument("ranks must be dense from 1".into()));
        }
        match self.preferred_index() {
            Some(i) if self.candidates[i].y == self.preferred => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "preferred must be the rank-1 candidate".into(),
                ))
            }
        }
        if let Some(c) = self.candidates.iter().find(|c| c.y >= completion_count) {
            return Err(Error::IndexOutOfRange {
                what: "completion",
                index: c.y,
                bound: completion_count,
            });
        }
        Ok(())
    }

    /// The preferred completion and the remaining candidates in rank order.
    pub fn candidate_set(&self) -> CandidateSet {
        let mut rest: Vec<&RankedCandidate> = self.candidates.iter().filter(|c| c.rank != 1).collect();
        rest.sort_by_key(|c| c.rank);
        CandidateSet {
            x: self.x,
            preferred: self.preferred,
            candidates: rest.iter().map(|c| c.y).collect(),
            noise: rest.iter().map(|c| c.noise).collect(),
        }
    }

    pub fn has_noise(&self) -> bool {
        self.candidates.iter().any(|c| c.noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub enabled: bool,
    /// Transpositions applied to the preferred sequence.
    #[serde(default = "one")]
    pub swap_count: usize,
}

fn one() -> usize {
    1
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            swap_count: 1,
        }
    }
}

/// How the preferred completion is picked from a candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Judge {
    /// Sort by ground-truth reward.
    #[default]
    TrueReward,
    /// Keep a running champion over noise-free pairwise comparisons.
    Pairwise,
}

/// Index of the best candidate. Ties go to the smaller completion id.
pub fn judge_best(env: &Environment, x: usize, candidates: &[usize], judge: Judge) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::NotEnoughCandidates {
            needed: 1,
            available: 0,
        });
    }
    let better = |a: usize, b: usize| -> Result<bool> {
        let (ra, rb) = (env.true_reward(x, a)?, env.true_reward(x, b)?);
        Ok(ra > rb || (ra == rb && a < b))
    };
    match judge {
        Judge::TrueReward => {
            let mut best = 0;
            for i in 1..candidates.len() {
                if better(candidates[i], candidates[best])? {
                    best = i;
                }
            }
            Ok(best)
        }
        Judge::Pairwise => {
            // The champion meets each challenger once: len − 1 comparisons.
            let mut champion = 0;
            for challenger in 1..candidates.len() {
                if !better(candidates[champion], candidates[challenger])? {
                    champion = challenger;
                }
            }
            Ok(champion)
        }
    }
}

/// Ranks `ys` by true reward (descending, ties by id) after moving the
/// judge's pick to the front.
fn rank_candidates(env: &Environment, x: usize, ys: &[usize], judge: Judge) -> Result<Vec<RankedCandidate>> {
    let best = judge_best(env, x, ys, judge)?;
    let mut rest: Vec<usize> = ys.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, &y)| y).collect();
    let rewards = env.reward_row(x);
    rest.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    Ok(std::iter::once(ys[best])
        .chain(rest)
        .enumerate()
        .map(|(i, y)| RankedCandidate {
            y,
            rank: i + 1,
            noise: false,
        })
        .collect())
}

/// Applies `swaps` random transpositions of unequal tokens; `None` when the
/// sequence has no two distinct tokens.
fn swap_noise<R: Rng + ?Sized>(seq: &[u32], swaps: usize, rng: &mut R) -> Option<Vec<u32>> {
    let pairs: Vec<(usize, usize)> = (0..seq.len())
        .flat_map(|i| (i + 1..seq.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| seq[i] != seq[j])
        .collect();
    if pairs.is_empty() {
        return None;
    }
    loop {
        let mut out = seq.to_vec();
        for _ in 0..swaps.max(1) {
            let movable: Vec<(usize, usize)> = (0..out.len())
                .flat_map(|i| (i + 1..out.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| out[i] != out[j])
                .collect();
            let (i, j) = movable[rng.random_range(0..movable.len())];
            out.swap(i, j);
        }
        if out != seq {
            return Some(out);
        }
    }
}

/// Draws records: `x ~ ρ`, `L + 1` distinct candidates from the proposal,
/// ranked by the judge; optionally appends a corrupted copy of the
/// preferred completion as an extra, lowest-ranked candidate.
pub fn generate_dataset(
    env: &Environment,
    proposal: &Proposal,
    l: usize,
    n_records: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    generate_dataset_with(env, proposal, l, n_records, noise, Judge::TrueReward, seed)
}

pub fn generate_dataset_with(
    env: &Environment,
    proposal: &Proposal,
    l: usize,
    n_records: usize,
    noise: NoiseSpec,
    judge: Judge,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if l == 0 {
        return Err(Error::InvalidArgument("L must be at least 1".into()));
    }
    if l + 1 > env.completion_count() {
        return Err(Error::InsufficientSupport {
            needed: l + 1,
            available: env.completion_count(),
        });
    }
    if proposal.shape() != env.shape() {
        return Err(Error::ShapeMismatch {
            expected: env.shape(),
            got: proposal.shape(),
        });
    }
    if noise.enabled && env.spec().max_length < 2 {
        return Err(Error::InvalidArgument("noise injection needs max_length ≥ 2".into()));
    }
    let prompts = Categorical::from_probs(env.prompt_weights());
    (0..n_records)
        .map(|i| {
            let mut rng = seeded_rng(mix_seed(seed, i as u64));
            let x = prompts.sample(&mut rng);
            let ys = sample_without_replacement(proposal.row_log_probs(x), l + 1, &mut rng);
            let mut candidates = rank_candidates(env, x, &ys, judge)?;
            let preferred = candidates[0].y;
            let mut degenerate_noise = false;
            if noise.enabled {
                let seq = env.completions().sequence(preferred)?;
                match swap_noise(seq, noise.swap_count, &mut rng) {
                    Some(s) => candidates.push(RankedCandidate {
                        y: env.completions().id_of(&s).expect("permutation stays in the table"),
                        rank: candidates.len() + 1,
                        noise: true,
                    }),
                    None => {
                        degenerate_noise = true;
                        log::debug!("record {i}: preferred completion {preferred} has no distinct tokens to swap");
                    }
                }
            }
            Ok(PreferenceRecord {
                x,
                preferred,
                candidates,
                degenerate_noise,
            })
        })
        .collect()
}

pub fn write_jsonl<W: Write>(records: &[PreferenceRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferenceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, RewardFamily, RewardParams};
    use crate::policy::TabularPolicy;

    fn env(vocab: usize, len: usize) -> Environment {
        Environment::new(EnvSpec {
            prompt_count: 3,
            vocab_size: vocab,
            max_length: len,
            reward_family: RewardFamily::RandomNormal,
            reward_params: RewardParams::default(),
            prompt_weights: None,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn pairwise_dataset_shape() {
        let e = env(2, 2);
        let mu = Proposal::uniform(3, 6);
        let d = generate_dataset(&e, &mu, 1, 50, NoiseSpec::default(), 1).unwrap();
        assert_eq!(d.len(), 50);
        for r in &d {
            r.validate(6).unwrap();
            assert_eq!(r.candidates.len(), 2);
            assert_ne!(r.candidates[0].y, r.candidates[1].y);
        }
    }

    #[test]
    fn ranks_follow_true_reward() {
        let e = env(3, 2);
        let mu = Proposal::reference(&TabularPolicy::random(3, 12, 1.0, 2)).unwrap();
        let d = generate_dataset(&e, &mu, 5, 200, NoiseSpec::default(), 9).unwrap();
        for r in &d {
            let mut by_rank = r.candidates.clone();
            by_rank.sort_by_key(|c| c.rank);
            for w in by_rank.windows(2) {
                assert!(e.true_reward(r.x, w[0].y).unwrap() >= e.true_reward(r.x, w[1].y).unwrap());
            }
        }
    }

    #[test]
    fn noise_candidate_is_a_transposition() {
        let e = env(3, 3);
        let mu = Proposal::uniform(3, e.completion_count());
        let d = generate_dataset(&e, &mu, 3, 300, NoiseSpec { enabled: true, swap_count: 1 }, 4).unwrap();
        let mut seen = 0;
        for r in &d {
            r.validate(e.completion_count()).unwrap();
            let noise: Vec<_> = r.candidates.iter().filter(|c| c.noise).collect();
            let a = e.completions().sequence(r.preferred).unwrap();
            if r.degenerate_noise {
                assert!(noise.is_empty());
                assert!(a.len() == 1 || a.iter().all(|t| *t == a[0]));
            } else {
                assert_eq!(noise.len(), 1);
                assert_eq!(noise[0].rank, r.candidates.len());
                let b = e.completions().sequence(noise[0].y).unwrap();
                seen += 1;
                assert_eq!(a.len(), b.len());
                assert_eq!(a.iter().zip(b).filter(|(u, v)| u != v).count(), 2);
                let (mut sa, mut sb) = (a.to_vec(), b.to_vec());
                sa.sort();
                sb.sort();
                assert_eq!(sa, sb);
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn errors_and_edge_cases() {
        let e = env(2, 1);
        let mu = Proposal::uniform(3, 2);
        assert!(matches!(
            generate_dataset(&e, &mu, 2, 1, NoiseSpec::default(), 0),
            Err(Error::InsufficientSupport { needed: 3, available: 2 })
        ));
        assert!(generate_dataset(&e, &mu, 1, 1, NoiseSpec { enabled: true, swap_count: 1 }, 0).is_err());
        assert!(generate_dataset(&e, &mu, 1, 0, NoiseSpec::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn judges_agree_without_comparison_noise() {
        let e = env(3, 3);
        let mut rng = seeded_rng(3);
        for _ in 0..500 {
            let ys = sample_without_replacement(&vec![0.0; e.completion_count()], 6, &mut rng);
            let x = rng.random_range(0..3);
            assert_eq!(
                judge_best(&e, x, &ys, Judge::TrueReward).unwrap(),
                judge_best(&e, x, &ys, Judge::Pairwise).unwrap()
            );
        }
    }

    #[test]
    fn jsonl_round_trip_and_wire_format() {
        let e = env(3, 2);
        let mu = Proposal::uniform(3, 12);
        let d = generate_dataset(&e, &mu, 2, 20, NoiseSpec { enabled: true, swap_count: 1 }, 6).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&d, &mut buf).unwrap();
        assert_eq!(read_jsonl(&buf[..]).unwrap(), d);
        let first: serde_json::Value = serde_json::from_slice(buf.split(|b| *b == b'\n').next().unwrap()).unwrap();
        assert!(first["x"].is_u64() && first["preferred"].is_u64());
        assert!(first["candidates"][0]["y"].is_u64());
        assert!(first["candidates"][0]["rank"].is_u64());
        assert!(first["candidates"][0]["noise"].is_boolean());
    }

    #[test]
    fn candidate_set_excludes_preferred_and_keeps_flags() {
        let r = PreferenceRecord {
            x: 1,
            preferred: 4,
            candidates: vec![
                RankedCandidate { y: 2, rank: 3, noise: false },
                RankedCandidate { y: 4, rank: 1, noise: false },
                RankedCandidate { y: 0, rank: 2, noise: false },
                RankedCandidate { y: 5, rank: 4, noise: true },
            ],
            degenerate_noise: false,
        };
        r.validate(6).unwrap();
        let cs = r.candidate_set();
        assert_eq!(cs.candidates, vec![0, 2, 5]);
        assert_eq!(cs.noise, vec![false, false, true]);
    }
}
