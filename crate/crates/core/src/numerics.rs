//! Log-space primitives and seeded sampling helpers shared by every module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `log Σ exp(v_i)`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() || max.is_nan() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a log-weight vector, computed relative to its maximum.
pub fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_weights);
    log_weights.iter().map(|v| (v - lse).exp()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = -log(1 + e^{-x})`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from a base seed
/// and a counter.
pub fn mix_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(counter.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Categorical distribution sampled by inverse CDF over a cumulative table.
#[derive(Debug, Clone)]
pub struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    /// Builds from log-weights (need not be normalized).
    pub fn from_log_weights(log_weights: &[f64]) -> Self {
        Self::from_probs(&softmax(log_weights))
    }

    pub fn from_probs(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Renormalize so the last entry is exactly 1.
        if acc > 0.0 {
            for c in &mut cdf {
                *c /= acc;
            }
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { cdf }
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    /// Maps a uniform draw in `[0, 1)` to an index.
    pub fn invert(&self, u: f64) -> usize {
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.invert(rng.random::<f64>())
    }
}

/// Standard Gumbel draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Open interval (0, 1) keeps both logs finite.
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Draws `k` distinct indices with probability proportional to
/// `exp(log_weights)` by successive sampling without replacement
/// (Gumbel top-k). Entries with `-inf` log-weight are never selected.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    log_weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = log_weights
        .iter()
        .enumerate()
        .map(|(i, &lw)| (lw + gumbel(rng), i))
        .filter(|(key, _)| key.is_finite())
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}
