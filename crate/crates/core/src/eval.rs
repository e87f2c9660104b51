//! Evaluation: adjusted winrate, reward-oracle head-to-head matches, exact
//! KL to the regularized optimum, and the JSON/CSV reports.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_shape, expected_reward, optimal_policy, Environment};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, seeded_rng, Categorical};
use crate::policy::TabularPolicy;
use crate::training::Judge;

/// Candidate wins, baseline wins and ties.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub n_cand: u64,
    pub n_base: u64,
    pub n_tie: u64,
}

impl MatchResult {
    pub fn total(&self) -> u64 {
        self.n_cand + self.n_base + self.n_tie
    }

    fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::Win => self.n_cand += 1,
            Outcome::Loss => self.n_base += 1,
            Outcome::Tie => self.n_tie += 1,
        }
    }
}

/// `(N_cand + N_tie / 2) / (N_cand + N_base + N_tie)`.
pub fn adjusted_winrate(m: &MatchResult) -> Result<f64> {
    let total = m.total();
    if total == 0 {
        return Err(Error::EmptyMatch);
    }
    Ok((m.n_cand as f64 + m.n_tie as f64 / 2.0) / total as f64)
}

/// Wilson score interval for a proportion `p` observed over `n` trials.
pub fn wilson_interval(p: f64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

/// How the two policies' draws for a game are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// One uniform per game drives both inverse-CDF draws, so identical
    /// policies always tie and swapping the policies mirrors every game.
    #[default]
    Shared,
    /// Separate uniforms.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchSettings {
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
    pub judge: Judge,
    pub coupling: Coupling,
    pub seed: u64,
}

impl Default for MatchSettings {
    fn default() -> Self {
        Self {
            n_prompts: 1000,
            samples_per_prompt: 1,
            judge: Judge::TrueReward,
            coupling: Coupling::Shared,
            seed: 0,
        }
    }
}

/// One judged game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchLog {
    pub prompt: usize,
    pub y_a: usize,
    pub y_b: usize,
    pub r_a: f64,
    pub r_b: f64,
    pub outcome: Outcome,
}

fn judge_pair(r_a: f64, r_b: f64) -> Outcome {
    // Both judges reduce to comparing exact table rewards; equality is a tie.
    if r_a > r_b {
        Outcome::Win
    } else if r_a < r_b {
        Outcome::Loss
    } else {
        Outcome::Tie
    }
}

/// Plays `n_prompts × samples_per_prompt` games of `a` (candidate) against
/// `b` (baseline), judged by the ground-truth reward.
pub fn head_to_head(
    env: &Environment,
    a: &TabularPolicy,
    b: &TabularPolicy,
    settings: &MatchSettings,
) -> Result<(MatchResult, Vec<MatchLog>)> {
    check_shape(env, a)?;
    check_shape(env, b)?;
    let prompts = Categorical::from_probs(env.prompt_weights());
    let rows_a: Vec<Categorical> = (0..env.prompt_count()).map(|x| Categorical::from_probs(&a.row_probs(x))).collect();
    let rows_b: Vec<Categorical> = (0..env.prompt_count()).map(|x| Categorical::from_probs(&b.row_probs(x))).collect();
    let mut result = MatchResult::default();
    let mut logs = Vec::with_capacity(settings.n_prompts * settings.samples_per_prompt);
    for i in 0..settings.n_prompts {
        let mut rng = seeded_rng(mix_seed(settings.seed, i as u64));
        let x = prompts.sample(&mut rng);
        for _ in 0..settings.samples_per_prompt {
            let u: f64 = rng.random();
            let v: f64 = match settings.coupling {
                Coupling::Shared => u,
                Coupling::Independent => rng.random(),
            };
            let y_a = rows_a[x].invert(u);
            let y_b = rows_b[x].invert(v);
            let r_a = env.true_reward(x, y_a)?;
            let r_b = env.true_reward(x, y_b)?;
            let outcome = judge_pair(r_a, r_b);
            result.record(outcome);
            logs.push(MatchLog {
                prompt: x,
                y_a,
                y_b,
                r_a,
                r_b,
                outcome,
            });
        }
    }
    Ok((result, logs))
}

/// Exact `P(win) + P(tie)/2` for one game under the given coupling.
pub fn exact_adjusted_winrate(env: &Environment, a: &TabularPolicy, b: &TabularPolicy, coupling: Coupling) -> Result<f64> {
    check_shape(env, a)?;
    check_shape(env, b)?;
    let mut total = 0.0;
    for (x, &rho) in env.prompt_weights().iter().enumerate() {
        let pa = a.row_probs(x);
        let pb = b.row_probs(x);
        let r = env.reward_row(x);
        let score = |ya: usize, yb: usize| match judge_pair(r[ya], r[yb]) {
            Outcome::Win => 1.0,
            Outcome::Tie => 0.5,
            Outcome::Loss => 0.0,
        };
        let mut row = 0.0;
        match coupling {
            Coupling::Independent => {
                for (ya, qa) in pa.iter().enumerate() {
                    for (yb, qb) in pb.iter().enumerate() {
                        row += qa * qb * score(ya, yb);
                    }
                }
            }
            Coupling::Shared => {
                // Walk the merged CDF breakpoints of both rows.
                let (ca, cb) = (cumulative(&pa), cumulative(&pb));
                let (mut i, mut j, mut lo) = (0, 0, 0.0);
                while i < ca.len() && j < cb.len() {
                    let hi = ca[i].min(cb[j]);
                    row += (hi - lo) * score(i, j);
                    lo = hi;
                    if ca[i] <= hi {
                        i += 1;
                    }
                    if cb[j] <= hi {
                        j += 1;
                    }
                }
            }
        }
        total += rho * row;
    }
    Ok(total)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = p
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    if let Some(last) = c.last_mut() {
        *last = 1.0;
    }
    c
}

/// `KL(p(·|x) ‖ q(·|x))` for one row of log-probabilities.
pub fn kl_row(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| **lp > f64::NEG_INFINITY)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// `E_{x~ρ}[KL(p(·|x) ‖ q(·|x))]` by exact summation.
pub fn expected_kl(env: &Environment, p: &TabularPolicy, q: &TabularPolicy) -> Result<f64> {
    check_shape(env, p)?;
    check_shape(env, q)?;
    Ok(env
        .prompt_weights()
        .iter()
        .enumerate()
        .map(|(x, rho)| rho * kl_row(&p.row_logp(x), &q.row_logp(x)))
        .sum())
}

/// `E_{x~ρ}[KL(π*(·|x) ‖ π(·|x))]`, with `π*` built from the reference.
pub fn kl_to_pistar(env: &Environment, policy: &TabularPolicy, reference: &TabularPolicy, beta: f64) -> Result<f64> {
    let pistar = optimal_policy(env, reference, beta)?;
    expected_kl(env, &pistar, policy)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySummary {
    pub kl_to_pistar: f64,
    pub expected_reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptBreakdown {
    pub prompt: usize,
    pub matches: MatchResult,
    pub winrate: Option<f64>,
    pub kl_to_pistar: f64,
    pub expected_reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub winrate: f64,
    pub winrate_ci95: (f64, f64),
    pub matches: MatchResult,
    pub kl_to_pistar: f64,
    pub expected_reward: f64,
    pub baseline: PolicySummary,
    pub per_prompt: Vec<PromptBreakdown>,
}

/// Matches `a` against `b` and summarizes both against `π*`.
pub fn evaluate(
    env: &Environment,
    a: &TabularPolicy,
    b: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    settings: &MatchSettings,
) -> Result<(EvalReport, Vec<MatchLog>)> {
    let (matches, logs) = head_to_head(env, a, b, settings)?;
    let winrate = adjusted_winrate(&matches)?;
    let pistar = optimal_policy(env, reference, beta)?;
    let mut per_prompt: Vec<PromptBreakdown> = (0..env.prompt_count())
        .map(|x| {
            let lp = a.row_logp(x);
            PromptBreakdown {
                prompt: x,
                matches: MatchResult::default(),
                winrate: None,
                kl_to_pistar: kl_row(&pistar.row_logp(x), &lp),
                expected_reward: lp.iter().zip(env.reward_row(x)).map(|(l, r)| l.exp() * r).sum(),
            }
        })
        .collect();
    for log in &logs {
        per_prompt[log.prompt].matches.record(log.outcome);
    }
    for p in &mut per_prompt {
        p.winrate = adjusted_winrate(&p.matches).ok();
    }
    let report = EvalReport {
        winrate,
        winrate_ci95: wilson_interval(winrate, matches.total(), 1.96),
        matches,
        kl_to_pistar: expected_kl(env, &pistar, a)?,
        expected_reward: expected_reward(env, a)?,
        baseline: PolicySummary {
            kl_to_pistar: expected_kl(env, &pistar, b)?,
            expected_reward: expected_reward(env, b)?,
        },
        per_prompt,
    };
    Ok((report, logs))
}

/// Writes `prompt,y_a,y_b,r_a,r_b,outcome`.
pub fn write_match_csv<W: Write>(logs: &[MatchLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["prompt", "y_a", "y_b", "r_a", "r_b", "outcome"])?;
    for l in logs {
        let outcome = match l.outcome {
            Outcome::Win => "win",
            Outcome::Loss => "loss",
            Outcome::Tie => "tie",
        };
        out.write_record([
            l.prompt.to_string(),
            l.y_a.to_string(),
            l.y_b.to_string(),
            l.r_a.to_string(),
            l.r_b.to_string(),
            outcome.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
