//! Tabular softmax policies and the implicit reward `log π_θ / π_ref`.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::grad::GradEstimate;
use crate::numerics::{logsumexp, seeded_rng};

const CHECKPOINT_MAGIC: &[u8; 8] = b"MCPOCKPT";

/// Per-prompt logits over the full completion table, with a cached
/// log-normalizer per row.
///
/// Logits may be `-inf` (zero mass) but never `+inf` or NaN, and every row
/// keeps at least one finite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    rows: usize,
    cols: usize,
    logits: Vec<f64>,
    lse: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self::from_logits(rows, cols, vec![0.0; rows * cols]).expect("zero logits are valid")
    }

    /// Logits drawn i.i.d. from `N(0, scale²)`.
    pub fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let logits = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Self::from_logits(rows, cols, logits).expect("finite logits are valid")
    }

    pub fn from_logits(rows: usize, cols: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                got: (logits.len() / cols.max(1), cols),
            });
        }
        if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        let mut p = Self {
            rows,
            cols,
            logits,
            lse: vec![0.0; rows],
        };
        p.recache();
        if p.lse.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy row with no finite logit".into()));
        }
        Ok(p)
    }

    fn recache(&mut self) {
        for x in 0..self.rows {
            self.lse[x] = logsumexp(&self.logits[x * self.cols..(x + 1) * self.cols]);
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row_logits(&self, x: usize) -> &[f64] {
        &self.logits[x * self.cols..(x + 1) * self.cols]
    }

    pub fn row_lse(&self, x: usize) -> f64 {
        self.lse[x]
    }

    /// The only way to change parameters: mutate the logits, then the
    /// normalizer cache is rebuilt.
    pub fn update<F: FnOnce(&mut [f64])>(&mut self, f: F) -> Result<()> {
        f(&mut self.logits);
        if self.logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            self.recache();
            return Err(Error::NonFinite("policy logits after update".into()));
        }
        self.recache();
        Ok(())
    }

    pub fn logp(&self, x: usize, y: usize) -> Result<f64> {
        check_index("prompt", x, self.rows)?;
        check_index("completion", y, self.cols)?;
        Ok(self.logits[x * self.cols + y] - self.lse[x])
    }

    pub fn row_logp(&self, x: usize) -> Vec<f64> {
        let l = self.lse[x];
        self.row_logits(x).iter().map(|v| v - l).collect()
    }

    pub fn row_probs(&self, x: usize) -> Vec<f64> {
        let l = self.lse[x];
        self.row_logits(x).iter().map(|v| (v - l).exp()).collect()
    }

    /// `∂ logp(x, y) / ∂ logits = onehot(y) − softmax(logits[x])` on row `x`.
    pub fn grad_logp(&self, x: usize, y: usize) -> Result<GradEstimate> {
        check_index("prompt", x, self.rows)?;
        check_index("completion", y, self.cols)?;
        let mut g = GradEstimate::zeros(self.rows, self.cols);
        self.accumulate_grad_logp(&mut g, x, y, 1.0);
        Ok(g)
    }

    /// `g[x] += coeff · (onehot(y) − softmax(logits[x]))`. Indices are
    /// assumed validated by the caller.
    pub(crate) fn accumulate_grad_logp(&self, g: &mut GradEstimate, x: usize, y: usize, coeff: f64) {
        let l = self.lse[x];
        let logits = self.row_logits(x);
        let row = g.row_mut(x);
        for (k, r) in row.iter_mut().enumerate() {
            *r -= coeff * (logits[k] - l).exp();
        }
        row[y] += coeff;
    }

    /// `g[x] += coeff · Σ_i w_i onehot(y_i) − coeff · softmax(logits[x])`
    /// for weights summing to one.
    pub(crate) fn accumulate_weighted_grad_logp(
        &self,
        g: &mut GradEstimate,
        x: usize,
        ys: &[usize],
        weights: &[f64],
        coeff: f64,
    ) {
        let l = self.lse[x];
        let logits = self.row_logits(x);
        let total: f64 = weights.iter().sum();
        let row = g.row_mut(x);
        for (k, r) in row.iter_mut().enumerate() {
            *r -= coeff * total * (logits[k] - l).exp();
        }
        for (&y, &w) in ys.iter().zip(weights) {
            row[y] += coeff * w;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            rows: self.rows,
            cols: self.cols,
            logits: self.logits.clone(),
        }
    }

    /// Writes JSON for `.json` paths, the binary format otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if is_json(path) {
            serde_json::to_writer(&mut f, &self.to_checkpoint())?;
            f.write_all(b"\n")?;
        } else {
            self.write_binary(&mut f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        if is_json(path) {
            let ck: Checkpoint = serde_json::from_reader(f)?;
            ck.into_policy()
        } else {
            Self::read_binary(&mut f)
        }
    }

    /// Binary layout: magic `MCPOCKPT`, rows and cols as little-endian u64,
    /// then row-major little-endian f64 logits.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.logits {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::ConfigInvalid("not a policy checkpoint".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut logits = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut word)?;
            logits.push(f64::from_le_bytes(word));
        }
        Self::from_logits(rows, cols, logits)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// JSON checkpoint: shape header plus row-major logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<f64>,
}

impl Checkpoint {
    pub fn into_policy(self) -> Result<TabularPolicy> {
        TabularPolicy::from_logits(self.rows, self.cols, self.logits)
    }
}

/// `r_θ(x, y) = log π_θ(y|x) − log π_ref(y|x)`.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitReward<'a> {
    pub target: &'a TabularPolicy,
    pub reference: &'a TabularPolicy,
}

impl<'a> ImplicitReward<'a> {
    pub fn new(target: &'a TabularPolicy, reference: &'a TabularPolicy) -> Result<Self> {
        if target.shape() != reference.shape() {
            return Err(Error::ShapeMismatch {
                expected: reference.shape(),
                got: target.shape(),
            });
        }
        Ok(Self { target, reference })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    pub fn reward(&self, x: usize, y: usize) -> Result<f64> {
        let lr = self.reference.logp(x, y)?;
        if lr == f64::NEG_INFINITY {
            return Err(Error::UnsupportedPoint { x, y });
        }
        Ok(self.target.logp(x, y)? - lr)
    }

    pub fn rewards(&self, x: usize, ys: &[usize]) -> Result<Vec<f64>> {
        ys.iter().map(|&y| self.reward(x, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};

    #[test]
    fn uniform_logp() {
        let p = TabularPolicy::uniform(2, 14);
        for y in 0..14 {
            assert!((p.logp(1, y).unwrap() + 14f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_way_logp() {
        let p = TabularPolicy::from_logits(1, 2, vec![1.0, 0.0]).unwrap();
        let e = 1f64.exp();
        assert!((p.logp(0, 0).unwrap() + (1.0 + 1.0 / e).ln()).abs() < 1e-15);
        assert!((p.logp(0, 1).unwrap() + (1.0 + e).ln()).abs() < 1e-15);
    }

    #[test]
    fn rows_normalize_and_logp_nonpositive() {
        let p = TabularPolicy::random(3, 12, 3.0, 5);
        for x in 0..3 {
            let s: f64 = p.row_probs(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert!(p.row_logp(x).iter().all(|v| *v <= 1e-12));
        }
    }

    #[test]
    fn out_of_range_ids() {
        let p = TabularPolicy::uniform(2, 3);
        assert!(matches!(p.logp(2, 0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(p.grad_logp(0, 3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn grad_logp_uniform_row() {
        let p = TabularPolicy::uniform(2, 4);
        let g = p.grad_logp(1, 2).unwrap();
        assert_eq!(g.row(1), &[-0.25, -0.25, 0.75, -0.25]);
        assert!(g.row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_logp_rows_sum_to_zero() {
        for seed in 0..1000u64 {
            let p = TabularPolicy::random(2, 6, 2.0, seed);
            let x = (seed % 2) as usize;
            let y = (seed % 6) as usize;
            let g = p.grad_logp(x, y).unwrap();
            assert!(g.row(x).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn grad_logp_matches_finite_differences() {
        for seed in 0..50u64 {
            let p = TabularPolicy::random(2, 6, 1.5, seed);
            let (x, y) = ((seed % 2) as usize, (seed % 6) as usize);
            let g = p.grad_logp(x, y).unwrap();
            let fd = central_difference(
                |theta| {
                    TabularPolicy::from_logits(2, 6, theta.to_vec())
                        .unwrap()
                        .logp(x, y)
                        .unwrap()
                },
                p.logits(),
                1e-6,
            );
            assert!(rel_error(&g.values, &fd) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn shift_invariance() {
        let mut p = TabularPolicy::random(2, 5, 1.0, 9);
        let before: Vec<f64> = p.row_logp(0);
        p.update(|l| l[..5].iter_mut().for_each(|v| *v += 123.25)).unwrap();
        for (a, b) in before.iter().zip(p.row_logp(0)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn implicit_reward_cases() {
        let r = TabularPolicy::random(2, 4, 1.0, 1);
        let ir = ImplicitReward::new(&r, &r).unwrap();
        assert_eq!(ir.reward(1, 3).unwrap(), 0.0);

        let target = TabularPolicy::uniform(1, 2);
        let reference = TabularPolicy::from_logits(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let ir = ImplicitReward::new(&target, &reference).unwrap();
        assert!((ir.reward(0, 0).unwrap() - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((ir.reward(0, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn implicit_reward_telescopes_under_reference() {
        for seed in 0..20 {
            let t = TabularPolicy::random(2, 6, 1.0, seed);
            let r = TabularPolicy::random(2, 6, 1.0, seed + 100);
            let ir = ImplicitReward::new(&t, &r).unwrap();
            for x in 0..2 {
                let s: f64 = (0..6)
                    .map(|y| r.logp(x, y).unwrap().exp() * ir.reward(x, y).unwrap().exp())
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_reference_mass_is_unsupported() {
        let t = TabularPolicy::uniform(1, 3);
        let r = TabularPolicy::from_logits(1, 3, vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let ir = ImplicitReward::new(&t, &r).unwrap();
        assert!(matches!(ir.reward(0, 1), Err(Error::UnsupportedPoint { x: 0, y: 1 })));
    }

    #[test]
    fn binary_and_json_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = TabularPolicy::random(3, 7, 4.0, 77);
        for name in ["p.json", "p.bin"] {
            let path = dir.path().join(name);
            p.save(&path).unwrap();
            let q = TabularPolicy::load(&path).unwrap();
            let a: Vec<u64> = p.logits().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.logits().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    proptest::proptest! {
        #[test]
        fn checkpoint_binary_round_trip_is_bit_exact(
            logits in proptest::collection::vec(-1e6f64..1e6, 6)
        ) {
            let p = TabularPolicy::from_logits(2, 3, logits).unwrap();
            let mut buf = Vec::new();
            p.write_binary(&mut buf).unwrap();
            let q = TabularPolicy::read_binary(&mut buf.as_slice()).unwrap();
            proptest::prop_assert_eq!(p.logits(), q.logits());
            let json = serde_json::to_string(&p.to_checkpoint()).unwrap();
            let r: Checkpoint = serde_json::from_str(&json).unwrap();
            proptest::prop_assert_eq!(p.logits(), r.logits.as_slice());
        }
    }
}
