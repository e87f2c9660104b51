use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{expected_reward, optimal_policy, Environment};
use crate::error::{Error, Result};
use crate::eval::expected_kl;
use crate::grad::GradEstimate;
use crate::losses::{baseline_loss, expected_nll_exact, rnce_loss, LossEval, LossName, LossSpec, PairContext};
use crate::numerics::{mix_seed, seeded_rng};
use crate::partition::{ProbModel, Proposal};
use crate::policy::{ImplicitReward, TabularPolicy};
use crate::samplers::{select_negative_positions, CandidateSet, SamplerSpec};

use super::dataset::{generate_dataset_with, Judge, NoiseSpec, PreferenceRecord};

pub const DIVERGENCE_GRAD_NORM: f64 = 1e6;
pub const TRACE_HEADER: [&str; 6] = ["step", "loss", "grad_norm", "exact_nll", "kl_to_pistar", "expected_reward"];

/// When kernel selection reads the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelCadence {
    /// The current snapshot at every step.
    #[default]
    PerStep,
    /// A snapshot frozen at the start of each epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineSettings {
    /// Candidates drawn per prompt beyond the preferred one (`L`).
    pub candidates: usize,
    /// Records generated at the start of every segment.
    pub records: usize,
    pub noise: NoiseSpec,
}

impl Default for OnlineSettings {
    fn default() -> Self {
        Self {
            candidates: 4,
            records: 256,
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerSpec,
    pub lr: f64,
    /// Total optimizer steps; derived from epochs and batch size when absent.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub online: bool,
    #[serde(default = "default_segments")]
    pub online_segments: usize,
    #[serde(default)]
    pub online_settings: OnlineSettings,
    #[serde(default)]
    pub judge: Judge,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel_cadence: KernelCadence,
    /// Always use the injected noise candidate as a negative when present.
    #[serde(default)]
    pub force_noise_negative: bool,
}

fn default_sampler() -> SamplerSpec {
    SamplerSpec::new(Default::default(), crate::losses::DEFAULT_BETA, 1, 0)
}

fn default_batch() -> usize {
    128
}

fn default_epochs() -> usize {
    2
}

fn default_segments() -> usize {
    3
}

impl TrainConfig {
    pub fn new(loss: LossSpec, lr: f64) -> Self {
        let beta = loss.beta;
        Self {
            loss,
            sampler: SamplerSpec::new(Default::default(), beta, 1, 0),
            lr,
            steps: None,
            batch_size: default_batch(),
            epochs: default_epochs(),
            online: false,
            online_segments: default_segments(),
            online_settings: OnlineSettings::default(),
            judge: Judge::default(),
            seed: 0,
            kernel_cadence: KernelCadence::default(),
            force_noise_negative: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::ConfigInvalid(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if self.online_segments == 0 {
            return Err(Error::ConfigInvalid("online_segments must be at least 1".into()));
        }
        if !(self.sampler.beta > 0.0 && self.sampler.beta.is_finite()) {
            return Err(Error::ConfigInvalid("sampler beta must be positive".into()));
        }
        Ok(())
    }
}

/// The fixed world a run trains in.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub env: &'a Environment,
    pub reference: &'a TabularPolicy,
    /// `μ` for the exact-NLL objective and its metric.
    pub proposal: &'a Proposal,
    /// Regularization strength defining `π*`.
    pub beta_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub exact_nll: f64,
    pub kl_to_pistar: f64,
    pub expected_reward: f64,
}

/// Noise-candidate selection counts for one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub noise_records: usize,
    pub noise_selected: usize,
    /// Expected noise selections under uniform choice from each pool.
    pub uniform_expected: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub epochs: Vec<EpochStats>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// `θ ← θ − lr · g`.
pub fn sgd_step(policy: &mut TabularPolicy, grad: &GradEstimate, lr: f64) -> Result<()> {
    if grad.shape() != policy.shape() {
        return Err(Error::ShapeMismatch {
            expected: policy.shape(),
            got: grad.shape(),
        });
    }
    if lr == 0.0 {
        return Ok(());
    }
    policy.update(|logits| {
        for (t, g) in logits.iter_mut().zip(&grad.values) {
            *t -= lr * g;
        }
    })
}

pub fn write_trace_csv<W: Write>(trace: &TrainTrace, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for r in &trace.rows {
        out.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.exact_nll.to_string(),
            r.kl_to_pistar.to_string(),
            r.expected_reward.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn online_segment_seed(seed: u64, segment: usize) -> u64 {
    mix_seed(seed ^ 0x6f6e_6c69_6e65, segment as u64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(seed ^ 0x65_706f_6368, epoch as u64)
}

fn record_seed(cfg: &TrainConfig, step: usize, slot: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(cfg.seed, cfg.sampler.rng_seed), step as u64), slot as u64)
}

struct Run<'a> {
    ctx: TrainContext<'a>,
    cfg: &'a TrainConfig,
    pistar: TabularPolicy,
    policy: TabularPolicy,
    trace: TrainTrace,
    step: usize,
}

/// Negatives chosen for one record, as positions into its candidate list.
fn choose_negatives(sel: &ImplicitReward, cs: &CandidateSet, cfg: &TrainConfig, m: usize, seed: u64) -> Result<Vec<usize>> {
    let spec = SamplerSpec {
        draws: m,
        rng_seed: seed,
        ..cfg.sampler.clone()
    };
    let noise_pos = cs.noise.iter().position(|&n| n);
    match (cfg.force_noise_negative, noise_pos) {
        (true, Some(p)) => {
            let mut picked = vec![p];
            if m > 1 {
                let keep: Vec<usize> = (0..cs.len()).filter(|&i| i != p).collect();
                let reduced = CandidateSet::new(cs.x, cs.preferred, keep.iter().map(|&i| cs.candidates[i]).collect());
                let spec = SamplerSpec { draws: m - 1, ..spec };
                picked.extend(select_negative_positions(sel, &reduced, &spec)?.into_iter().map(|i| keep[i]));
            }
            Ok(picked)
        }
        _ => select_negative_positions(sel, cs, &spec),
    }
}

impl<'a> Run<'a> {
    fn new(ctx: TrainContext<'a>, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pistar = optimal_policy(ctx.env, ctx.reference, ctx.beta_star)?;
        Ok(Self {
            ctx,
            cfg,
            pistar,
            policy: ctx.reference.clone(),
            trace: TrainTrace::default(),
            step: 0,
        })
    }

    fn exact_nll(&self, policy: &TabularPolicy) -> Result<f64> {
        let ir = ImplicitReward::new(policy, self.ctx.reference)?;
        let model = ProbModel::new(self.ctx.proposal, ir, self.cfg.loss.beta)?;
        Ok(expected_nll_exact(&model, self.ctx.env.prompt_weights(), &self.pistar)?.value)
    }

    /// Batch-mean loss and gradient, plus noise selection counts.
    fn batch_loss(&self, batch: &[CandidateSet], selector: &TabularPolicy) -> Result<(f64, GradEstimate, usize)> {
        let cfg = self.cfg;
        let (rows, cols) = self.policy.shape();
        let ir = ImplicitReward::new(&self.policy, self.ctx.reference)?;
        if cfg.loss.name == LossName::NllExact {
            let model = ProbModel::new(self.ctx.proposal, ir, cfg.loss.beta)?;
            let e = expected_nll_exact(&model, self.ctx.env.prompt_weights(), &self.pistar)?;
            return Ok((e.value, e.grad, 0));
        }
        let sel = ImplicitReward::new(selector, self.ctx.reference)?;
        let m = if cfg.loss.name == LossName::Mcpo { cfg.loss.m } else { 1 };
        let step = self.step;
        let picks: Vec<Vec<usize>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, cs)| choose_negatives(&sel, cs, cfg, m, record_seed(cfg, step, i)))
            .collect::<Result<_>>()?;

        let delta = if matches!(cfg.loss.name, LossName::Bco | LossName::Kto) {
            let mut acc = 0.0;
            for (cs, p) in batch.iter().zip(&picks) {
                acc += cfg.loss.beta * (ir.reward(cs.x, cs.preferred)? + ir.reward(cs.x, cs.candidates[p[0]])?);
            }
            Some(acc / (2 * batch.len()) as f64)
        } else {
            None
        };

        let evals: Vec<LossEval> = batch
            .par_iter()
            .zip(&picks)
            .map(|(cs, p)| {
                let negatives: Vec<usize> = p.iter().map(|&i| cs.candidates[i]).collect();
                if cfg.loss.name == LossName::Mcpo {
                    rnce_loss(&ir, cs.x, cs.preferred, &negatives, cfg.loss.beta)
                } else {
                    let mut pc = PairContext::from_env(self.ctx.env, cs.preferred, negatives[0])?;
                    pc.delta = delta;
                    baseline_loss(&cfg.loss, &ir, cs.x, cs.preferred, negatives[0], &pc)
                }
            })
            .collect::<Result<_>>()?;

        let mut grad = GradEstimate::zeros(rows, cols);
        let mut value = 0.0;
        for e in &evals {
            value += e.value;
            grad.add_scaled(&e.grad, 1.0)?;
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        grad.n_samples = batch.len();
        let noise_hits = batch
            .iter()
            .zip(&picks)
            .map(|(cs, p)| p.iter().filter(|&&i| cs.is_noise(i)).count())
            .sum();
        Ok((value / n, grad, noise_hits))
    }

    fn one_step(&mut self, batch: &[CandidateSet], selector: Option<&TabularPolicy>) -> Result<usize> {
        let current = self.policy.clone();
        let selector = selector.unwrap_or(&current);
        let (loss, grad, noise_hits) = self.batch_loss(batch, selector)?;
        let grad_norm = grad.norm_l2();
        self.step += 1;
        if !loss.is_finite() || !grad_norm.is_finite() || grad_norm > DIVERGENCE_GRAD_NORM {
            let reason = if loss.is_finite() {
                format!("gradient norm {grad_norm}")
            } else {
                format!("loss {loss}")
            };
            return Err(Error::DivergenceDetected {
                step: self.step,
                reason,
                trace: Box::new(std::mem::take(&mut self.trace)),
            });
        }
        sgd_step(&mut self.policy, &grad, self.cfg.lr)?;
        let row = TraceRow {
            step: self.step,
            loss,
            grad_norm,
            exact_nll: self.exact_nll(&self.policy)?,
            kl_to_pistar: expected_kl(self.ctx.env, &self.pistar, &self.policy)?,
            expected_reward: expected_reward(self.ctx.env, &self.policy)?,
        };
        self.trace.rows.push(row);
        Ok(noise_hits)
    }

    /// Runs `n_steps` over `data` in shuffled epochs.
    fn run_on(&mut self, data: &[PreferenceRecord], n_steps: usize) -> Result<()> {
        let cfg = self.cfg;
        if cfg.loss.name == LossName::NllExact {
            for _ in 0..n_steps {
                self.one_step(&[], None)?;
            }
            return Ok(());
        }
        if data.is_empty() {
            if n_steps == 0 {
                return Ok(());
            }
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let sets: Vec<CandidateSet> = data.iter().map(PreferenceRecord::candidate_set).collect();
        let batch = cfg.batch_size.min(sets.len());
        if batch < cfg.batch_size {
            log::warn!("batch_size {} exceeds dataset size {}; using {}", cfg.batch_size, sets.len(), batch);
        }
        let mut done = 0;
        let mut epoch = 0;
        let epoch_base = self.trace.epochs.len();
        while done < n_steps {
            let mut order: Vec<usize> = (0..sets.len()).collect();
            order.shuffle(&mut seeded_rng(epoch_seed(cfg.seed, epoch_base + epoch)));
            let frozen = match cfg.kernel_cadence {
                KernelCadence::PerEpoch => Some(self.policy.clone()),
                KernelCadence::PerStep => None,
            };
            let mut stats = EpochStats {
                epoch: epoch_base + epoch,
                ..Default::default()
            };
            for chunk in order.chunks(batch) {
                if done == n_steps {
                    break;
                }
                let b: Vec<CandidateSet> = chunk.iter().map(|&i| sets[i].clone()).collect();
                stats.noise_selected += self.one_step(&b, frozen.as_ref())?;
                for cs in b.iter().filter(|cs| cs.noise.iter().any(|&n| n)) {
                    stats.noise_records += 1;
                    let m = if cfg.loss.name == LossName::Mcpo { cfg.loss.m } else { 1 };
                    stats.uniform_expected += m as f64 / cs.len() as f64;
                }
                done += 1;
            }
            self.trace.epochs.push(stats);
            epoch += 1;
        }
        Ok(())
    }
}

fn default_steps(cfg: &TrainConfig, records: usize) -> usize {
    cfg.epochs * records.div_ceil(cfg.batch_size.min(records.max(1)))
}

/// Offline training on a fixed dataset, starting from the reference.
pub fn train_offline(
    ctx: TrainContext,
    dataset: &[PreferenceRecord],
    cfg: &TrainConfig,
) -> Result<(TabularPolicy, TrainTrace)> {
    if cfg.online {
        return Err(Error::ConfigInvalid("train_offline called with online = true".into()));
    }
    for r in dataset {
        r.validate(ctx.env.completion_count())?;
    }
    let mut run = Run::new(ctx, cfg)?;
    let steps = cfg.steps.unwrap_or_else(|| default_steps(cfg, dataset.len()));
    run.run_on(dataset, steps)?;
    Ok((run.policy, run.trace))
}

/// Batched online training: the step budget is split into segments, and
/// each segment trains on records freshly sampled from the current policy
/// and ranked by the judge.
pub fn train_online(ctx: TrainContext, cfg: &TrainConfig) -> Result<(TabularPolicy, TrainTrace)> {
    if !cfg.online {
        return Err(Error::ConfigInvalid("train_online called with online = false".into()));
    }
    let mut run = Run::new(ctx, cfg)?;
    let os = &cfg.online_settings;
    let segments = cfg.online_segments;
    let total = cfg
        .steps
        .unwrap_or_else(|| segments * default_steps(cfg, os.records));
    for k in 0..segments {
        let n = total / segments + usize::from(k < total % segments);
        // Regeneration is a barrier: the policy is frozen while sampling.
        let generator = Proposal::frozen_policy(&run.policy)?;
        let data = generate_dataset_with(
            ctx.env,
            &generator,
            os.candidates,
            os.records,
            os.noise,
            cfg.judge,
            online_segment_seed(cfg.seed, k),
        )?;
        run.run_on(&data, n)?;
    }
    Ok((run.policy, run.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, RewardParams};
    use crate::samplers::Strategy;
    use crate::training::generate_dataset;

    fn setup() -> (Environment, TabularPolicy) {
        let env = Environment::new(EnvSpec {
            prompt_count: 2,
            vocab_size: 2,
            max_length: 2,
            reward_family: Default::default(),
            reward_params: RewardParams::default(),
            prompt_weights: None,
            seed: 3,
        })
        .unwrap();
        let reference = TabularPolicy::random(2, 6, 0.5, 1);
        (env, reference)
    }

    #[test]
    fn sgd_step_hand_cases() {
        let mut p = TabularPolicy::from_logits(1, 1, vec![2.0]).unwrap();
        let mut g = GradEstimate::zeros(1, 1);
        g.values[0] = 2.0; // ∇ ½θ² at θ = 2
        sgd_step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.logits(), &[1.0]);
        let before = p.clone();
        sgd_step(&mut p, &GradEstimate::zeros(1, 1), 0.3).unwrap();
        assert_eq!(p, before);
        assert!(matches!(
            sgd_step(&mut p, &GradEstimate::zeros(2, 1), 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn armijo_probe_on_rnce() {
        let (_, reference) = setup();
        let t = TabularPolicy::random(2, 6, 0.5, 9);
        let f = |th: &[f64]| {
            let tt = TabularPolicy::from_logits(2, 6, th.to_vec()).unwrap();
            rnce_loss(&ImplicitReward::new(&tt, &reference).unwrap(), 0, 1, &[2, 4], 1.0)
                .unwrap()
                .value
        };
        let e = rnce_loss(&ImplicitReward::new(&t, &reference).unwrap(), 0, 1, &[2, 4], 1.0).unwrap();
        let mut moved = t.clone();
        sgd_step(&mut moved, &e.grad, 1e-3).unwrap();
        let g2: f64 = e.grad.values.iter().map(|v| v * v).sum();
        assert!(f(moved.logits()) <= f(t.logits()) - 0.5 * 1e-3 * g2);
    }

    #[test]
    fn zero_lr_keeps_reference() {
        let (env, reference) = setup();
        let mu = Proposal::reference(&reference).unwrap();
        let data = generate_dataset(&env, &mu, 3, 40, NoiseSpec::default(), 2).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        let cfg = TrainConfig::new(LossSpec::new(LossName::Mcpo), 0.0);
        let (p, trace) = train_offline(ctx, &data, &cfg).unwrap();
        assert_eq!(p, reference);
        assert_eq!(trace.rows.len(), 2);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (env, reference) = setup();
        let mu = Proposal::reference(&reference).unwrap();
        let data = generate_dataset(&env, &mu, 4, 64, NoiseSpec::default(), 2).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        let mut cfg = TrainConfig::new(LossSpec::new(LossName::Mcpo).with_beta(0.5).with_m(2), 0.5);
        cfg.batch_size = 16;
        cfg.sampler.strategy = Strategy::Mc;
        let a = train_offline(ctx, &data, &cfg).unwrap();
        let b = train_offline(ctx, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_trace_csv(&a.1, &mut ca).unwrap();
        write_trace_csv(&b.1, &mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(String::from_utf8(ca)
            .unwrap()
            .starts_with("step,loss,grad_norm,exact_nll,kl_to_pistar,expected_reward\n"));
    }

    #[test]
    fn exact_nll_training_converges() {
        let (env, _) = setup();
        let reference = TabularPolicy::uniform(2, 6);
        let mu = Proposal::reference(&reference).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        let mut cfg = TrainConfig::new(LossSpec::new(LossName::NllExact).with_beta(1.0), 0.5);
        cfg.steps = Some(2000);
        let (_, trace) = train_offline(ctx, &[], &cfg).unwrap();
        assert!(trace.last().unwrap().kl_to_pistar < 1e-3);
        for w in trace.rows.windows(10).step_by(10) {
            assert!(w[9].kl_to_pistar <= w[0].kl_to_pistar);
        }
    }

    #[test]
    fn divergence_is_reported_with_partial_trace() {
        let (env, reference) = setup();
        let mu = Proposal::reference(&reference).unwrap();
        let data = generate_dataset(&env, &mu, 1, 8, NoiseSpec::default(), 2).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        // SPPO's quadratic grows without bound at a huge step size.
        let mut cfg = TrainConfig::new(LossSpec::new(LossName::Sppo).with_beta(1.0), 1e4);
        cfg.batch_size = 8;
        cfg.steps = Some(50);
        match train_offline(ctx, &data, &cfg) {
            Err(Error::DivergenceDetected { step, trace, .. }) => {
                assert!(step > 1);
                assert_eq!(trace.rows.len(), step - 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_segment_online_matches_offline_on_fresh_data() {
        let (env, reference) = setup();
        let mu = Proposal::reference(&reference).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        let mut cfg = TrainConfig::new(LossSpec::new(LossName::Mcpo).with_beta(0.5), 0.3);
        cfg.batch_size = 32;
        cfg.online = true;
        cfg.online_segments = 1;
        cfg.online_settings.records = 64;
        cfg.online_settings.candidates = 3;
        let (online, t_on) = train_online(ctx, &cfg).unwrap();
        let data = generate_dataset(&env, &Proposal::frozen_policy(&reference).unwrap(), 3, 64, NoiseSpec::default(), online_segment_seed(cfg.seed, 0)).unwrap();
        cfg.online = false;
        let (offline, t_off) = train_offline(ctx, &data, &cfg).unwrap();
        assert_eq!(online, offline);
        assert_eq!(t_on, t_off);
    }

    #[test]
    fn forced_noise_always_selects_noise() {
        let env = Environment::new(EnvSpec {
            prompt_count: 2,
            vocab_size: 3,
            max_length: 3,
            reward_family: Default::default(),
            reward_params: RewardParams::default(),
            prompt_weights: None,
            seed: 3,
        })
        .unwrap();
        let reference = TabularPolicy::uniform(2, env.completion_count());
        let mu = Proposal::reference(&reference).unwrap();
        let data = generate_dataset(&env, &mu, 3, 32, NoiseSpec { enabled: true, swap_count: 1 }, 2).unwrap();
        let ctx = TrainContext {
            env: &env,
            reference: &reference,
            proposal: &mu,
            beta_star: 1.0,
        };
        let mut cfg = TrainConfig::new(LossSpec::new(LossName::Dpo), 0.1);
        cfg.force_noise_negative = true;
        cfg.batch_size = 8;
        let (_, trace) = train_offline(ctx, &data, &cfg).unwrap();
        for e in &trace.epochs {
            assert_eq!(e.noise_selected, e.noise_records);
        }
    }
}
