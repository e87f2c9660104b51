//! Training objectives and their analytic gradients: the exact NLL, the
//! sampled ranking-NCE loss, DPO and the pairwise baseline family.
//!
//! Every pairwise loss depends on θ only through `a = log π_θ(y_0|x)` and
//! `b = log π_θ(y_1|x)`, so each row supplies `(value, ∂/∂a, ∂/∂b)` and the
//! parameter gradient is assembled from `∇ log π_θ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{check_index, Error, Result};
use crate::grad::GradEstimate;
use crate::numerics::{log_sigmoid, logsumexp, sigmoid, softmax};
use crate::partition::{exact_grad_log_z, exact_log_z, ProbModel};
use crate::policy::{ImplicitReward, TabularPolicy};
use crate::samplers::{select_negative_positions, CandidateSet, SamplerSpec};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mcpo,
    NllExact,
    Dpo,
    Rpo,
    Exo,
    Simpo,
    Cpo,
    Bco,
    Kto,
    Apo,
    Sppo,
    Nca,
}

impl LossName {
    pub const ALL: [LossName; 12] = [
        LossName::Mcpo,
        LossName::NllExact,
        LossName::Dpo,
        LossName::Rpo,
        LossName::Exo,
        LossName::Simpo,
        LossName::Cpo,
        LossName::Bco,
        LossName::Kto,
        LossName::Apo,
        LossName::Sppo,
        LossName::Nca,
    ];

    pub const PAIRWISE: [LossName; 10] = [
        LossName::Dpo,
        LossName::Rpo,
        LossName::Exo,
        LossName::Simpo,
        LossName::Cpo,
        LossName::Bco,
        LossName::Kto,
        LossName::Apo,
        LossName::Sppo,
        LossName::Nca,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Mcpo => "mcpo",
            LossName::NllExact => "nll_exact",
            LossName::Dpo => "dpo",
            LossName::Rpo => "rpo",
            LossName::Exo => "exo",
            LossName::Simpo => "simpo",
            LossName::Cpo => "cpo",
            LossName::Bco => "bco",
            LossName::Kto => "kto",
            LossName::Apo => "apo",
            LossName::Sppo => "sppo",
            LossName::Nca => "nca",
        }
    }

    pub fn is_pairwise(self) -> bool {
        Self::PAIRWISE.contains(&self)
    }

    fn uses_lambda(self) -> bool {
        matches!(self, LossName::Rpo | LossName::Cpo)
    }

    fn uses_gamma(self) -> bool {
        matches!(self, LossName::Simpo | LossName::Cpo)
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the EXO row's `logits` symbol stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExoVariant {
    /// `r_θ(y_0) − r_θ(y_1)`.
    #[default]
    Margin,
    /// `r_θ(y_0)` alone; independent of the rejected completion.
    Chosen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub name: LossName,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default = "default_m", rename = "M", alias = "m")]
    pub m: usize,
    #[serde(default)]
    pub exo_variant: ExoVariant,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_m() -> usize {
    1
}

impl LossSpec {
    pub fn new(name: LossName) -> Self {
        Self {
            name,
            beta: DEFAULT_BETA,
            lambda: None,
            gamma: None,
            m: 1,
            exo_variant: ExoVariant::default(),
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(DEFAULT_LAMBDA)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    /// Checks ranges and warns about hyperparameters the loss ignores.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::ConfigInvalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.lambda.is_some_and(|l| l.is_nan() || l < 0.0) {
            return Err(Error::ConfigInvalid("lambda must be nonnegative".into()));
        }
        if self.m == 0 {
            return Err(Error::ConfigInvalid("M must be at least 1".into()));
        }
        if self.lambda.is_some() && !self.name.uses_lambda() {
            log::warn!("loss '{}' ignores lambda", self.name);
        }
        if self.gamma.is_some() && !self.name.uses_gamma() {
            log::warn!("loss '{}' ignores gamma", self.name);
        }
        if self.m != 1 && self.name != LossName::Mcpo {
            log::warn!("loss '{}' ignores M", self.name);
        }
        Ok(())
    }
}

/// Per-pair quantities that are not functions of θ.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairContext {
    /// Token lengths `|y_0|`, `|y_1|`.
    pub len0: usize,
    pub len1: usize,
    /// Batch reference shift for the BCO/KTO rows (held constant).
    pub delta: Option<f64>,
}

impl PairContext {
    pub fn from_env(env: &Environment, y0: usize, y1: usize) -> Result<Self> {
        let table = env.completions();
        Ok(Self {
            len0: table.length_of(y0)?,
            len1: table.length_of(y1)?,
            delta: None,
        })
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossEval {
    pub value: f64,
    pub grad: GradEstimate,
    pub terms: BTreeMap<String, f64>,
    /// Positions in the candidate list chosen as negatives, when a sampler ran.
    pub selected: Vec<usize>,
}

impl LossEval {
    fn new(value: f64, grad: GradEstimate) -> Self {
        Self {
            value,
            grad,
            terms: BTreeMap::new(),
            selected: Vec::new(),
        }
    }

    fn term(mut self, name: &str, v: f64) -> Self {
        self.terms.insert(name.to_string(), v);
        self
    }
}

/// `L^NLL = −β r_θ(x, y_0) + log Z_θ(x)` with the exact normalizer.
pub fn nll_exact(model: &ProbModel, x: usize, y0: usize) -> Result<LossEval> {
    let r0 = model.ir.reward(x, y0)?;
    let log_z = exact_log_z(model, x)?;
    let mut grad = exact_grad_log_z(model, x)?;
    model.ir.target.accumulate_grad_logp(&mut grad, x, y0, -model.beta);
    grad.n_samples = 1;
    Ok(LossEval::new(-model.beta * r0 + log_z, grad)
        .term("positive_term", -model.beta * r0)
        .term("log_z", log_z))
}

/// `E_{x~ρ, y~target}[L^NLL(x, y)]` and its gradient, by enumeration.
pub fn expected_nll_exact(model: &ProbModel, prompt_weights: &[f64], target: &TabularPolicy) -> Result<LossEval> {
    let (rows, cols) = model.ir.shape();
    if prompt_weights.len() != rows {
        return Err(Error::InvalidArgument("one prompt weight per prompt required".into()));
    }
    if target.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch {
            expected: (rows, cols),
            got: target.shape(),
        });
    }
    let mut grad = GradEstimate::zeros(rows, cols);
    let mut value = 0.0;
    for (x, &rho) in prompt_weights.iter().enumerate() {
        if rho == 0.0 {
            continue;
        }
        let q = target.row_probs(x);
        let log_z = exact_log_z(model, x)?;
        let mut expected_r = 0.0;
        for (y, &qy) in q.iter().enumerate() {
            if qy > 0.0 {
                expected_r += qy * model.ir.reward(x, y)?;
            }
        }
        value += rho * (-model.beta * expected_r + log_z);
        // Σ_y q(y) ∇ log π_θ(y|x) = q − softmax(θ_x) since q sums to one.
        let ys: Vec<usize> = (0..cols).collect();
        model
            .ir
            .target
            .accumulate_weighted_grad_logp(&mut grad, x, &ys, &q, -model.beta * rho);
        grad.add_scaled(&exact_grad_log_z(model, x)?, rho)?;
    }
    Ok(LossEval::new(value, grad))
}

/// Ranking-NCE loss `−β r_θ(x, y_0) + log Σ_{i=0}^{M} exp(β r_θ(x, y_i))`.
pub fn rnce_loss(ir: &ImplicitReward, x: usize, y0: usize, negatives: &[usize], beta: f64) -> Result<LossEval> {
    if negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    let ys: Vec<usize> = std::iter::once(y0).chain(negatives.iter().copied()).collect();
    let logits: Vec<f64> = ir.rewards(x, &ys)?.into_iter().map(|r| beta * r).collect();
    let lse = logsumexp(&logits);
    let w = softmax(&logits);
    let (rows, cols) = ir.shape();
    let mut grad = GradEstimate::zeros(rows, cols);
    ir.target.accumulate_grad_logp(&mut grad, x, y0, -beta);
    ir.target.accumulate_weighted_grad_logp(&mut grad, x, &ys, &w, beta);
    Ok(LossEval::new(lse - logits[0], grad)
        .term("positive_term", -logits[0])
        .term("logsumexp_term", lse)
        .term("weight_preferred", w[0]))
}

/// `−log σ(β r_θ(x, y_0) − β r_θ(x, y_1))`.
pub fn dpo_loss(ir: &ImplicitReward, x: usize, y0: usize, y1: usize, beta: f64) -> Result<LossEval> {
    baseline_loss(
        &LossSpec::new(LossName::Dpo).with_beta(beta),
        ir,
        x,
        y0,
        y1,
        &PairContext::default(),
    )
}

/// `−β σ(β r_1 − β r_0) ∇(r_0 − r_1)`, built from two independent
/// `grad_logp` evaluations.
pub fn dpo_grad_closed_form(
    ir: &ImplicitReward,
    x: usize,
    y0: usize,
    y1: usize,
    beta: f64,
) -> Result<GradEstimate> {
    let r0 = ir.reward(x, y0)?;
    let r1 = ir.reward(x, y1)?;
    let mut g = ir.target.grad_logp(x, y0)?;
    g.add_scaled(&ir.target.grad_logp(x, y1)?, -1.0)?;
    g.scale(-beta * sigmoid(beta * r1 - beta * r0));
    Ok(g)
}

struct Row {
    value: f64,
    da: f64,
    db: f64,
}

/// `−log σ(z)` and its derivative in `z`.
fn neg_log_sigmoid(z: f64) -> (f64, f64) {
    (-log_sigmoid(z), -sigmoid(-z))
}

fn pair_row(spec: &LossSpec, r0: f64, r1: f64, a: f64, b: f64, ctx: &PairContext) -> Result<Row> {
    let beta = spec.beta;
    let row = match spec.name {
        LossName::Dpo | LossName::Rpo => {
            let (v, d) = neg_log_sigmoid(beta * (r0 - r1));
            let mut row = Row {
                value: v,
                da: beta * d,
                db: -beta * d,
            };
            if spec.name == LossName::Rpo {
                row.value -= spec.lambda() * r0;
                row.da -= spec.lambda();
            }
            row
        }
        LossName::Exo => {
            let (u, du_da, du_db) = match spec.exo_variant {
                ExoVariant::Margin => (beta * (r0 - r1), beta, -beta),
                ExoVariant::Chosen => (beta * r0, beta, 0.0),
            };
            let s = sigmoid(u);
            let value = -s * log_sigmoid(u) + s * log_sigmoid(-u);
            // The two log terms differ by exactly −u, so the row is −u σ(u).
            let d = -s - u * s * sigmoid(-u);
            Row {
                value,
                da: d * du_da,
                db: d * du_db,
            }
        }
        LossName::Simpo | LossName::Cpo => {
            if ctx.len0 == 0 || ctx.len1 == 0 {
                return Err(Error::InvalidArgument("length-normalized losses need |y| ≥ 1".into()));
            }
            let c0 = beta / ctx.len0 as f64;
            let c1 = beta / ctx.len1 as f64;
            let (v, d) = neg_log_sigmoid(c0 * a - c1 * b - spec.gamma());
            let mut row = Row {
                value: v,
                da: c0 * d,
                db: -c1 * d,
            };
            if spec.name == LossName::Cpo {
                row.value -= spec.lambda() * c0 * a;
                row.da -= spec.lambda() * c0;
            }
            row
        }
        LossName::Bco | LossName::Kto => {
            let delta = ctx.delta.ok_or_else(|| Error::MissingHyperparameter {
                loss: spec.name.to_string(),
                param: "delta",
            })?;
            let (v0, d0) = neg_log_sigmoid(beta * r0 - delta);
            let (v1, d1) = neg_log_sigmoid(-beta * r1 - delta);
            Row {
                value: v0 + v1,
                da: beta * d0,
                db: -beta * d1,
            }
        }
        LossName::Apo => {
            let (v0, d0) = neg_log_sigmoid(beta * r0);
            let (v1, d1) = neg_log_sigmoid(beta * r1);
            Row {
                value: v0 - v1,
                da: beta * d0,
                db: -beta * d1,
            }
        }
        LossName::Sppo => {
            let e0 = r0 - 0.5 / beta;
            let e1 = r1 + 0.5 / beta;
            Row {
                value: e0 * e0 + e1 * e1,
                da: 2.0 * e0,
                db: 2.0 * e1,
            }
        }
        LossName::Nca => {
            let (v0, d0) = neg_log_sigmoid(beta * r0);
            let (v0n, d0n) = neg_log_sigmoid(-beta * r0);
            let (v1n, d1n) = neg_log_sigmoid(-beta * r1);
            Row {
                value: v0 + 0.5 * v0n + 0.5 * v1n,
                da: beta * d0 - 0.5 * beta * d0n,
                db: -0.5 * beta * d1n,
            }
        }
        LossName::Mcpo | LossName::NllExact => {
            return Err(Error::InvalidArgument(format!(
                "'{}' is not a pairwise loss",
                spec.name
            )))
        }
    };
    Ok(row)
}

/// One of the pairwise objectives on `(y_0, y_1)`.
pub fn baseline_loss(
    spec: &LossSpec,
    ir: &ImplicitReward,
    x: usize,
    y0: usize,
    y1: usize,
    ctx: &PairContext,
) -> Result<LossEval> {
    let (rows, cols) = ir.shape();
    check_index("prompt", x, rows)?;
    let r0 = ir.reward(x, y0)?;
    let r1 = ir.reward(x, y1)?;
    let a = ir.target.logp(x, y0)?;
    let b = ir.target.logp(x, y1)?;
    let row = pair_row(spec, r0, r1, a, b, ctx)?;
    if !row.value.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", spec.name)));
    }
    let mut grad = GradEstimate::zeros(rows, cols);
    ir.target.accumulate_grad_logp(&mut grad, x, y0, row.da);
    ir.target.accumulate_grad_logp(&mut grad, x, y1, row.db);
    Ok(LossEval::new(row.value, grad)
        .term("r_preferred", r0)
        .term("r_rejected", r1))
}

/// Ranking-NCE over `spec.m` negatives chosen by the sampler on the
/// current policy; the selection itself carries no gradient.
pub fn mcpo_loss(ir: &ImplicitReward, cs: &CandidateSet, spec: &LossSpec, sampler: &SamplerSpec) -> Result<LossEval> {
    let sampler = SamplerSpec {
        draws: spec.m,
        ..sampler.clone()
    };
    let positions = select_negative_positions(ir, cs, &sampler)?;
    let negatives: Vec<usize> = positions.iter().map(|&p| cs.candidates[p]).collect();
    let noise_hits = positions.iter().filter(|&&p| cs.is_noise(p)).count();
    let mut eval = rnce_loss(ir, cs.x, cs.preferred, &negatives, spec.beta)?.term("noise_selected", noise_hits as f64);
    eval.selected = positions;
    Ok(eval)
}
