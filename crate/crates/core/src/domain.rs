//! Validated belief, snapshot and parameter types.
//!
//! Beliefs live on the probability simplex. Every constructor either
//! returns a value that satisfies its invariants or an error; small
//! floating-point drift (within [`SIMPLEX_TOL`]) is renormalized away.

use std::collections::BTreeMap;
use std::ops::Deref;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance for all simplex membership checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the d-simplex: one agent's distribution over answers.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefVector(Vec<f64>);

impl BeliefVector {
    /// Accepts `entries` if they are on the simplex within [`SIMPLEX_TOL`].
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(entries, SIMPLEX_TOL)
    }

    /// Like [`BeliefVector::new`] with a caller-chosen tolerance for both the
    /// sum check and negative drift.
    pub fn with_tolerance(entries: Vec<f64>, tol: f64) -> Result<Self> {
        check_entries(&entries, tol)?;
        let sum: f64 = entries.iter().map(|x| x.max(0.0)).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self(renormalize(entries)))
    }

    pub fn uniform(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        Ok(Self(vec![1.0 / d as f64; d]))
    }

    /// Point mass on `label`.
    pub fn one_hot(d: usize, label: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::DimensionTooSmall(d));
        }
        if label >= d {
            return Err(Error::LabelOutOfRange { label, d });
        }
        let mut v = vec![0.0; d];
        v[label] = 1.0;
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax_label(self)
    }
}

impl Deref for BeliefVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_entries(entries: &[f64], tol: f64) -> Result<()> {
    if entries.len() < 2 {
        return Err(Error::DimensionTooSmall(entries.len()));
    }
    for (index, &value) in entries.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index });
        }
        if value < -tol {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    Ok(())
}

/// Clamps to `[0, inf)` and rescales onto the simplex. A vector whose sum is
/// already 1 up to summation rounding is returned unchanged, which makes the
/// operation idempotent.
fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 2.0 * v.len() as f64 * f64::EPSILON {
        for x in v.iter_mut() {
            *x /= sum;
        }
    }
    v
}

/// Scales a nonnegative vector onto the simplex.
///
/// Entries in `[-SIMPLEX_TOL, 0)` are treated as drift and clamped to zero.
/// The result is idempotent: normalizing twice gives bitwise the same vector.
pub fn normalize_belief(raw: &[f64]) -> Result<BeliefVector> {
    check_entries(raw, SIMPLEX_TOL)?;
    if raw.iter().all(|&x| x <= 0.0) {
        return Err(Error::AllZeroVector);
    }
    Ok(BeliefVector(renormalize(raw.to_vec())))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_label(b: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in b.iter().enumerate().skip(1) {
        if x > b[best] {
            best = i;
        }
    }
    best
}

/// Checks that `a` is a length-`n` probability vector.
pub fn check_simplex_weights(a: &[f64], n: usize) -> Result<()> {
    if a.len() != n {
        return Err(Error::WeightNotSimplex(format!(
            "expected {n} weights, got {}",
            a.len()
        )));
    }
    if let Some((i, x)) = a.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < -SIMPLEX_TOL) {
        return Err(Error::WeightNotSimplex(format!("entry {i} is {x}")));
    }
    let sum: f64 = a.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::WeightNotSimplex(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// The n agent beliefs at one round; row i is agent i.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSnapshot {
    rows: Vec<BeliefVector>,
}

impl BeliefSnapshot {
    pub fn new(rows: Vec<BeliefVector>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::ShapeMismatch("snapshot needs at least one agent".into()))?;
        let d = first.dim();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.dim() != d) {
            return Err(Error::ShapeMismatch(format!(
                "agent {i} has dimension {}, agent 0 has {d}",
                r.dim()
            )));
        }
        Ok(Self { rows })
    }

    /// Builds a snapshot from raw rows, each validated with [`BeliefVector::new`].
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows.into_iter().map(BeliefVector::new).collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    /// Builds a snapshot from an n x d matrix, accepting row drift up to `tol`.
    pub fn from_matrix(m: &DMatrix<f64>, tol: f64) -> Result<Self> {
        let rows = (0..m.nrows())
            .map(|i| BeliefVector::with_tolerance(m.row(i).iter().copied().collect(), tol))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.d(), |i, c| self.rows[i][c])
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows[0].dim()
    }

    pub fn rows(&self) -> &[BeliefVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &BeliefVector {
        &self.rows[i]
    }

    /// Unweighted mean belief.
    pub fn mean(&self) -> Vec<f64> {
        let w = vec![1.0 / self.n() as f64; self.n()];
        self.mixture(&w)
    }

    /// `sum_j a_j s_j`; the caller is responsible for `a` having length n.
    pub fn mixture(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        for (row, &w) in self.rows.iter().zip(a) {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += w * x;
            }
        }
        out
    }

    pub fn argmax_labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.argmax()).collect()
    }

    /// Largest entrywise difference to `other` (infinity on shape mismatch).
    pub fn max_abs_diff(&self, other: &BeliefSnapshot) -> f64 {
        if self.n() != other.n() || self.d() != other.d() {
            return f64::INFINITY;
        }
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// FJ parameters: stubbornness `gamma`, retention `alpha`, peer weights `w`
/// restricted to the directed adjacency `mask`.
///
/// An agent without any allowed peer keeps its peer-pull mass on itself.
#[derive(Debug, Clone, PartialEq)]
pub struct FJParameters {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    w: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl FJParameters {
    pub fn new(gamma: Vec<f64>, alpha: Vec<f64>, w: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        let n = gamma.len();
        if n == 0 {
            return Err(Error::InvalidParameters("no agents".into()));
        }
        if alpha.len() != n || w.shape() != (n, n) || mask.shape() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "gamma has {n} agents, alpha {}, w {:?}, mask {:?}",
                alpha.len(),
                w.shape(),
                mask.shape()
            )));
        }
        for (name, v) in [("gamma", &gamma), ("alpha", &alpha)] {
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
                return Err(Error::InvalidParameters(format!("{name}[{i}] = {x} not in [0,1]")));
            }
        }
        let mut w = w;
        for i in 0..n {
            if mask[(i, i)] {
                return Err(Error::InvalidParameters(format!("mask has self-loop at {i}")));
            }
            let mut sum = 0.0;
            let mut allowed = 0;
            for j in 0..n {
                let x = w[(i, j)];
                if !x.is_finite() || x < -SIMPLEX_TOL {
                    return Err(Error::InvalidParameters(format!("w[{i},{j}] = {x}")));
                }
                if !mask[(i, j)] {
                    if x != 0.0 {
                        return Err(Error::InvalidParameters(format!(
                            "w[{i},{j}] = {x} on an edge excluded by the mask"
                        )));
                    }
                    continue;
                }
                allowed += 1;
                sum += x.max(0.0);
            }
            if allowed == 0 {
                continue;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidParameters(format!("row {i} of w sums to {sum}")));
            }
            for j in 0..n {
                if mask[(i, j)] {
                    w[(i, j)] = w[(i, j)].max(0.0) / sum;
                }
            }
        }
        Ok(Self { gamma, alpha, w, mask })
    }

    /// Parameters on the complete directed graph without self-loops.
    pub fn complete(gamma: Vec<f64>, alpha: Vec<f64>, w: DMatrix<f64>) -> Result<Self> {
        let n = gamma.len();
        Self::new(gamma, alpha, w, complete_mask(n))
    }

    /// Constant gamma and alpha with uniform peer weights over the mask.
    pub fn uniform(n: usize, gamma: f64, alpha: f64, mask: DMatrix<bool>) -> Result<Self> {
        let w = uniform_weights(&mask);
        Self::new(vec![gamma; n], vec![alpha; n], w, mask)
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        (0..self.n()).all(|j| !self.mask[(i, j)])
    }

    /// W with isolated rows replaced by the unit row e_i.
    pub fn effective_w(&self) -> DMatrix<f64> {
        let mut w = self.w.clone();
        for i in 0..self.n() {
            if self.is_isolated(i) {
                w[(i, i)] = 1.0;
            }
        }
        w
    }

    /// One-step social matrix `A + (I - A) W`.
    pub fn social_matrix(&self) -> DMatrix<f64> {
        let w = self.effective_w();
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| {
            let own = if i == j { self.alpha[i] } else { 0.0 };
            own + (1.0 - self.alpha[i]) * w[(i, j)]
        })
    }
}

pub fn complete_mask(n: usize) -> DMatrix<bool> {
    DMatrix::from_fn(n, n, |i, j| i != j)
}

/// Row-uniform weights over the allowed edges of `mask`.
pub fn uniform_weights(mask: &DMatrix<bool>) -> DMatrix<f64> {
    let n = mask.nrows();
    let mut w = DMatrix::zeros(n, mask.ncols());
    for i in 0..n {
        let k = mask.row(i).iter().filter(|&&m| m).count();
        for j in 0..mask.ncols() {
            if mask[(i, j)] {
                w[(i, j)] = 1.0 / k as f64;
            }
        }
    }
    w
}

/// Snapshots for rounds 0..=T with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliberationTrajectory {
    pub snapshots: Vec<BeliefSnapshot>,
    pub correct_label: Option<usize>,
    pub sample_id: String,
    pub metadata: BTreeMap<String, String>,
}

impl DeliberationTrajectory {
    pub fn new(
        sample_id: impl Into<String>,
        snapshots: Vec<BeliefSnapshot>,
        correct_label: Option<usize>,
    ) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::ShapeMismatch("trajectory has no snapshots".into()))?;
        let (n, d) = (first.n(), first.d());
        if let Some((t, s)) = snapshots.iter().enumerate().find(|(_, s)| s.n() != n || s.d() != d) {
            return Err(Error::ShapeMismatch(format!(
                "round {t} is {}x{}, round 0 is {n}x{d}",
                s.n(),
                s.d()
            )));
        }
        if let Some(label) = correct_label {
            if label >= d {
                return Err(Error::LabelOutOfRange { label, d });
            }
        }
        Ok(Self {
            snapshots,
            correct_label,
            sample_id: sample_id.into(),
            metadata: BTreeMap::new(),
        })
    }

    /// Number of transitions T (snapshots minus one).
    pub fn rounds(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn innate(&self) -> &BeliefSnapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &BeliefSnapshot {
        self.snapshots.last().expect("trajectory is never empty")
    }

    pub fn n(&self) -> usize {
        self.snapshots[0].n()
    }

    pub fn d(&self) -> usize {
        self.snapshots[0].d()
    }
}

/// Readout weights `eta` and the induced equilibrium ensemble weights `pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(eta: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        check_simplex_weights(&eta, eta.len())?;
        check_simplex_weights(&pi, eta.len())?;
        Ok(Self { eta, pi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_belief(&[1.0, 1.0]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(normalize_belief(&[2.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        let b = normalize_belief(&[0.3, 0.3, 0.6]).unwrap();
        let want = [0.25, 0.25, 0.5];
        for (x, y) in b.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_errors() {
        assert_eq!(normalize_belief(&[0.0, 0.0]), Err(Error::AllZeroVector));
        assert!(matches!(
            normalize_belief(&[0.5, -0.1]),
            Err(Error::NegativeEntry { index: 1, .. })
        ));
        assert_eq!(normalize_belief(&[1.0]), Err(Error::DimensionTooSmall(1)));
        // drift inside tolerance is clamped
        let b = normalize_belief(&[1.0, -1e-12]).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_label(&[0.2, 0.7, 0.1]), 1);
        assert_eq!(argmax_label(&[0.5, 0.5]), 0);
        assert_eq!(argmax_label(&[0.1, 0.1, 0.8]), 2);
    }

    #[test]
    fn belief_vector_rejects_off_simplex() {
        assert!(matches!(
            BeliefVector::new(vec![0.5, 0.6]),
            Err(Error::NotNormalized { .. })
        ));
        assert!(BeliefVector::new(vec![0.5, 0.5 + 1e-10]).is_ok());
    }

    #[test]
    fn snapshot_shape_checked() {
        let err = BeliefSnapshot::from_rows(vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]]);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn params_validation() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(FJParameters::complete(vec![0.5, 0.5], vec![0.0, 0.0], w.clone()).is_ok());
        assert!(FJParameters::complete(vec![1.5, 0.5], vec![0.0, 0.0], w.clone()).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 1.0, 0.0]);
        assert!(FJParameters::complete(vec![0.5, 0.5], vec![0.0, 0.0], bad).is_err());
        let selfloop = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]);
        assert!(FJParameters::complete(vec![0.5, 0.5], vec![0.0, 0.0], selfloop).is_err());
    }

    #[test]
    fn isolated_agent_keeps_peer_mass() {
        let mut mask = complete_mask(3);
        mask[(2, 0)] = false;
        mask[(2, 1)] = false;
        let p = FJParameters::uniform(3, 0.2, 0.3, mask).unwrap();
        assert!(p.is_isolated(2));
        let b = p.social_matrix();
        assert_eq!(b[(2, 2)], 1.0);
        for i in 0..3 {
            assert!((b.row(i).sum() - 1.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in proptest::collection::vec(0.0f64..10.0, 2..12)) {
            prop_assume!(raw.iter().any(|&x| x > 0.0));
            let once = normalize_belief(&raw).unwrap();
            let twice = normalize_belief(&once).unwrap();
            prop_assert_eq!(once.as_slice(), twice.as_slice());
            let s: f64 = once.iter().sum();
            prop_assert!((s - 1.0).abs() <= SIMPLEX_TOL);
        }

        #[test]
        fn argmax_scale_invariant(raw in proptest::collection::vec(0.01f64..10.0, 2..12), c in 0.1f64..10.0) {
            let scaled: Vec<f64> = raw.iter().map(|x| x * c).collect();
            let a = normalize_belief(&raw).unwrap().argmax();
            let b = normalize_belief(&scaled).unwrap().argmax();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a, argmax_label(&raw));
        }
    }
}
