//! Numerical identity checks on an environment, gathered into one report
//! with a pass/fail verdict per check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, dual_gradient, rel_error, Dual};
use crate::losses::{
    baseline_loss, dpo_grad_closed_form, dpo_loss, mcpo_loss, nll_exact, rnce_loss, LossEval, LossName, LossSpec,
    PairContext,
};
use crate::numerics::{mix_seed, sample_without_replacement, seeded_rng};
use crate::partition::{
    cd_grad_log_z, verify_unbiasedness, verify_unbiasedness_with, ObservationSource, ProbModel, Proposal,
    UnbiasednessReport,
};
use crate::policy::{ImplicitReward, TabularPolicy};
use crate::samplers::{kernel_frequency_test, CandidateSet, SamplerSpec, Strategy};

pub const FD_STEP: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
pub const MAX_Z: f64 = 4.0;
pub const BIAS_Z: f64 = 6.0;
pub const MIN_P_VALUE: f64 = 1e-3;

/// A random point at which identities are checked: a target policy near
/// the reference, a prompt, distinct completions and a temperature.
#[derive(Debug, Clone)]
pub struct Instance {
    pub target: TabularPolicy,
    pub x: usize,
    /// `ys[0]` is the preferred completion.
    pub ys: Vec<usize>,
    pub beta: f64,
    pub delta: f64,
    pub m: usize,
    pub seed: u64,
}

impl Instance {
    pub fn draw(env: &Environment, reference: &TabularPolicy, seed: u64) -> Result<Self> {
        let (rows, cols) = env.shape();
        if cols < 2 {
            return Err(Error::NotEnoughCandidates {
                needed: 2,
                available: cols,
            });
        }
        let mut rng = seeded_rng(seed);
        let noise = TabularPolicy::random(rows, cols, 1.0, mix_seed(seed, 1));
        let logits: Vec<f64> = reference.logits().iter().zip(noise.logits()).map(|(a, b)| a + b).collect();
        let target = TabularPolicy::from_logits(rows, cols, logits)?;
        let x = rng.random_range(0..rows);
        let k = cols.min(5);
        let ys = sample_without_replacement(&vec![0.0; cols], k, &mut rng);
        let beta = (rng.random_range(0.01f64.ln()..2f64.ln())).exp();
        Ok(Self {
            target,
            x,
            m: rng.random_range(1..k),
            ys,
            beta,
            delta: rng.random_range(-0.5..0.5),
            seed,
        })
    }

    pub fn implicit_reward<'a>(&'a self, reference: &'a TabularPolicy) -> Result<ImplicitReward<'a>> {
        ImplicitReward::new(&self.target, reference)
    }
}

/// Central differences over the prompt row only; every other row of an
/// analytic gradient must be exactly zero and is compared against zero.
fn fd_on_row<F>(target: &TabularPolicy, x: usize, f: F) -> Vec<f64>
where
    F: Fn(&TabularPolicy) -> f64,
{
    let (rows, cols) = target.shape();
    let row = target.row_logits(x).to_vec();
    let partial = central_difference(
        |th| {
            let mut logits = target.logits().to_vec();
            logits[x * cols..(x + 1) * cols].copy_from_slice(th);
            f(&TabularPolicy::from_logits(rows, cols, logits).expect("finite perturbation"))
        },
        &row,
        FD_STEP,
    );
    let mut full = vec![0.0; rows * cols];
    full[x * cols..(x + 1) * cols].copy_from_slice(&partial);
    full
}

fn loss_at(
    name: LossName,
    inst: &Instance,
    target: &TabularPolicy,
    env: &Environment,
    reference: &TabularPolicy,
    negatives: Option<&[usize]>,
) -> Result<LossEval> {
    let ir = ImplicitReward::new(target, reference)?;
    let (x, y0, y1) = (inst.x, inst.ys[0], inst.ys[1]);
    match name {
        LossName::NllExact => {
            let mu = Proposal::reference(reference)?;
            nll_exact(&ProbModel::new(&mu, ir, inst.beta)?, x, y0)
        }
        LossName::Mcpo => match negatives {
            Some(neg) => rnce_loss(&ir, x, y0, neg, inst.beta),
            None => {
                let cs = CandidateSet::new(x, y0, inst.ys[1..].to_vec());
                let spec = LossSpec::new(LossName::Mcpo).with_beta(inst.beta).with_m(inst.m);
                mcpo_loss(&ir, &cs, &spec, &SamplerSpec::new(Strategy::Mc, inst.beta, inst.m, inst.seed))
            }
        },
        pairwise => {
            let spec = LossSpec::new(pairwise).with_beta(inst.beta);
            let ctx = PairContext::from_env(env, y0, y1)?.with_delta(inst.delta);
            baseline_loss(&spec, &ir, x, y0, y1, &ctx)
        }
    }
}

/// Relative error between a loss's analytic gradient and central
/// differences. For `mcpo` the selected negatives are held fixed.
/// `corrupt` scales the analytic gradient by `1 + 1e-3` first.
pub fn gradient_error(
    name: LossName,
    env: &Environment,
    reference: &TabularPolicy,
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
    let inst = Instance::draw(env, reference, seed)?;
    let eval = loss_at(name, &inst, &inst.target, env, reference, None)?;
    let negatives: Option<Vec<usize>> = (name == LossName::Mcpo)
        .then(|| eval.selected.iter().map(|&p| inst.ys[1 + p]).collect());
    let fd = fd_on_row(&inst.target, inst.x, |t| {
        loss_at(name, &inst, t, env, reference, negatives.as_deref())
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
    });
    let mut analytic = eval.grad.values;
    if corrupt {
        analytic.iter_mut().for_each(|g| *g *= 1.0 + 1e-3);
    }
    Ok(rel_error(&analytic, &fd))
}

/// `|RNCE(M = 1) − DPO|` on one pair.
pub fn dpo_reduction_gap(env: &Environment, reference: &TabularPolicy, seed: u64) -> Result<f64> {
    let inst = Instance::draw(env, reference, seed)?;
    let ir = inst.implicit_reward(reference)?;
    let (y0, y1) = (inst.ys[0], inst.ys[1]);
    let a = rnce_loss(&ir, inst.x, y0, &[y1], inst.beta)?.value;
    let b = dpo_loss(&ir, inst.x, y0, y1, inst.beta)?.value;
    Ok((a - b).abs())
}

/// Relative error between the closed-form DPO gradient and the one
/// assembled by the loss.
pub fn dpo_closed_form_error(env: &Environment, reference: &TabularPolicy, seed: u64) -> Result<f64> {
    let inst = Instance::draw(env, reference, seed)?;
    let ir = inst.implicit_reward(reference)?;
    let (y0, y1) = (inst.ys[0], inst.ys[1]);
    let assembled = dpo_loss(&ir, inst.x, y0, y1, inst.beta)?.grad;
    let closed = dpo_grad_closed_form(&ir, inst.x, y0, y1, inst.beta)?;
    Ok(rel_error(&assembled.values, &closed.values))
}

/// Relative error between the softmax-weighted contrastive gradient and a
/// forward-mode derivative of `log Σ_i exp(β r_θ(x, y_i))` on the same set.
pub fn cd_identity_error(env: &Environment, reference: &TabularPolicy, seed: u64) -> Result<f64> {
    let inst = Instance::draw(env, reference, seed)?;
    let mu = Proposal::reference(reference)?;
    let model = ProbModel::new(&mu, inst.implicit_reward(reference)?, inst.beta)?;
    let negatives = &inst.ys[1..=inst.m];
    let g = cd_grad_log_z(&model, inst.x, inst.ys[0], negatives)?;
    let cols = reference.cols();
    let x = inst.x;
    let ref_row = reference.row_logp(x);
    let ys: Vec<usize> = std::iter::once(inst.ys[0]).chain(negatives.iter().copied()).collect();
    let beta = inst.beta;
    let row_grad = dual_gradient(
        |th| {
            let lse = Dual::logsumexp(th);
            let terms: Vec<Dual> = ys
                .iter()
                .map(|&y| (th[y] - lse - Dual::constant(ref_row[y])).scale(beta))
                .collect();
            Dual::logsumexp(&terms)
        },
        inst.target.row_logits(x),
    );
    let mut full = vec![0.0; g.values.len()];
    full[x * cols..(x + 1) * cols].copy_from_slice(&row_grad);
    Ok(rel_error(&g.values, &full))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySettings {
    /// Random instances per gradient identity.
    pub instances: usize,
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    pub n_trials: usize,
    pub kernel_draws: usize,
    pub prompt: usize,
    pub seed: u64,
    /// Model temperature for the unbiasedness and kernel checks.
    pub beta: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            instances: 100,
            m: 2,
            n_trials: 200_000,
            kernel_draws: 100_000,
            prompt: 0,
            seed: 0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the check statistic.
    pub value: f64,
    pub threshold: f64,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < threshold,
            value,
            threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    #[serde(flatten)]
    pub unbiasedness: UnbiasednessReport,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn worst<F>(n: usize, seed: u64, f: F) -> Result<f64>
where
    F: Fn(u64) -> Result<f64>,
{
    (0..n as u64).try_fold(0.0f64, |m, i| Ok(m.max(f(mix_seed(seed, i))?)))
}

/// A policy away from the reference for the sampling checks.
fn perturbed(reference: &TabularPolicy, seed: u64) -> Result<TabularPolicy> {
    let (rows, cols) = reference.shape();
    let noise = TabularPolicy::random(rows, cols, 1.0, seed);
    let logits = reference.logits().iter().zip(noise.logits()).map(|(a, b)| a + b).collect();
    TabularPolicy::from_logits(rows, cols, logits)
}

/// Runs every check. Gradient checks fail on the corrupted path when
/// `corrupt_gradient` is set.
pub fn run_checks(
    env: &Environment,
    reference: &TabularPolicy,
    proposal: &Proposal,
    settings: &VerifySettings,
    corrupt_gradient: bool,
) -> Result<VerifyReport> {
    let n = settings.instances;
    let seed = settings.seed;
    let mut checks = Vec::new();
    for name in LossName::ALL {
        let e = worst(n, seed, |s| gradient_error(name, env, reference, s, corrupt_gradient))?;
        checks.push(CheckResult::at_most(format!("gradient/{name}"), e, GRADIENT_TOLERANCE));
    }
    checks.push(CheckResult::at_most(
        "dpo_reduction",
        worst(n, seed, |s| dpo_reduction_gap(env, reference, s))?,
        REDUCTION_TOLERANCE,
    ));
    checks.push(CheckResult::at_most(
        "dpo_closed_form",
        worst(n, seed, |s| dpo_closed_form_error(env, reference, s))?,
        IDENTITY_TOLERANCE,
    ));
    checks.push(CheckResult::at_most(
        "cd_identity",
        worst(n, seed, |s| cd_identity_error(env, reference, s))?,
        IDENTITY_TOLERANCE,
    ));

    let target = perturbed(reference, mix_seed(seed, 0x5eed))?;
    let ir = ImplicitReward::new(&target, reference)?;
    let model = ProbModel::new(proposal, ir, settings.beta)?;
    let unbiased = verify_unbiasedness(&model, settings.prompt, settings.m, settings.n_trials, seed)?;
    checks.push(CheckResult::at_most("unbiasedness", unbiased.max_z_score, MAX_Z));
    let biased = verify_unbiasedness_with(
        &model,
        settings.prompt,
        settings.m,
        settings.n_trials,
        seed,
        ObservationSource::Proposal,
    )?;
    checks.push(CheckResult::at_least("bias_witness", biased.max_z_score, BIAS_Z));

    let cols = env.completion_count();
    let mut rng = seeded_rng(mix_seed(seed, 0xca4d));
    let ys = sample_without_replacement(&vec![0.0; cols], cols.min(6), &mut rng);
    let cs = CandidateSet::new(settings.prompt, ys[0], ys[1..].to_vec());
    if cs.len() >= 2 {
        let chi = kernel_frequency_test(&ir, &cs, settings.beta, settings.kernel_draws, seed)?;
        checks.push(CheckResult::at_least("kernel_frequency", chi.p_value, MIN_P_VALUE));
    }

    Ok(VerifyReport {
        unbiasedness: unbiased,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn instances_are_reproducible() {
        let f = fixtures::standard();
        let a = Instance::draw(&f.env, &f.reference, 9).unwrap();
        let b = Instance::draw(&f.env, &f.reference, 9).unwrap();
        assert_eq!((a.x, &a.ys, a.beta, a.m), (b.x, &b.ys, b.beta, b.m));
        assert_eq!(a.target, b.target);
        let mut sorted = a.ys.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), a.ys.len());
        assert!((0.01..2.0).contains(&a.beta));
    }

    #[test]
    fn corruption_is_detected() {
        let f = fixtures::standard();
        for name in LossName::ALL {
            assert!(gradient_error(name, &f.env, &f.reference, 1, false).unwrap() < GRADIENT_TOLERANCE);
            assert!(gradient_error(name, &f.env, &f.reference, 1, true).unwrap() > GRADIENT_TOLERANCE);
        }
    }
}
