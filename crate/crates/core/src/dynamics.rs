//! Friedkin-Johnsen belief updates, the equilibrium of the linear system
//! `B(t+1) = Gamma S + H B(t)`, and the equilibrium ensemble weights.

use nalgebra::{DMatrix, DVector};

use crate::domain::{
    check_simplex_weights, AggregationWeights, BeliefSnapshot, BeliefVector, DeliberationTrajectory, FJParameters,
    SIMPLEX_TOL,
};
use crate::error::{Error, Result};

pub const DEFAULT_POWER_TOL: f64 = 1e-10;
pub const DEFAULT_POWER_MAX_ITER: usize = 10_000;
/// `equilibrium` requires `rho(H) < 1 - CONTRACTION_MARGIN`.
pub const CONTRACTION_MARGIN: f64 = 1e-6;
/// Rounds used by [`equilibrium_or_iterate`] when the closed form is unavailable.
pub const FALLBACK_ROUNDS: usize = 10_000;

const ROW_STOCHASTIC_TOL: f64 = 1e-8;

/// `H = (I - Gamma)(A + (I - A) W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrix(DMatrix<f64>);

impl SystemMatrix {
    /// Wraps an arbitrary square matrix, e.g. for spectral checks.
    pub fn from_matrix(h: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::ShapeMismatch(format!("H must be square, got {:?}", h.shape())));
        }
        Ok(Self(h))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `M = (I - H)^{-1} Gamma`, mapping innate beliefs to equilibrium beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix(DMatrix<f64>);

impl InfluenceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

fn check_step_shapes(params: &FJParameters, innate: &BeliefSnapshot, current: &BeliefSnapshot) -> Result<()> {
    if innate.n() != params.n() || current.n() != params.n() {
        return Err(Error::ShapeMismatch(format!(
            "parameters have {} agents, innate {}, current {}",
            params.n(),
            innate.n(),
            current.n()
        )));
    }
    if innate.d() != current.d() {
        return Err(Error::ShapeMismatch(format!(
            "innate dimension {} differs from current {}",
            innate.d(),
            current.d()
        )));
    }
    Ok(())
}

/// Raw (not renormalized) FJ update of every agent.
pub(crate) fn step_raw(
    params: &FJParameters,
    w_eff: &DMatrix<f64>,
    innate: &BeliefSnapshot,
    current: &BeliefSnapshot,
) -> Vec<Vec<f64>> {
    let n = params.n();
    let d = innate.d();
    (0..n)
        .map(|i| {
            let g = params.gamma()[i];
            let a = params.alpha()[i];
            let mut row = vec![0.0; d];
            for (j, b) in current.rows().iter().enumerate() {
                let wij = w_eff[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                for (r, &x) in row.iter_mut().zip(b.iter()) {
                    *r += wij * x;
                }
            }
            let s = innate.row(i);
            let b = current.row(i);
            for c in 0..d {
                row[c] = g * s[c] + (1.0 - g) * (a * b[c] + (1.0 - a) * row[c]);
            }
            row
        })
        .collect()
}

/// One FJ round together with the largest row-sum drift before renormalization.
pub fn fj_step_with_drift(
    params: &FJParameters,
    innate: &BeliefSnapshot,
    current: &BeliefSnapshot,
) -> Result<(BeliefSnapshot, f64)> {
    check_step_shapes(params, innate, current)?;
    let w_eff = params.effective_w();
    let mut drift: f64 = 0.0;
    let rows = step_raw(params, &w_eff, innate, current)
        .into_iter()
        .map(|row| {
            drift = drift.max((row.iter().sum::<f64>() - 1.0).abs());
            BeliefVector::new(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((BeliefSnapshot::new(rows)?, drift))
}

/// One FJ round:
/// `b_i(t+1) = g_i s_i + (1-g_i) a_i b_i(t) + (1-g_i)(1-a_i) sum_j w_ij b_j(t)`.
pub fn fj_step(params: &FJParameters, innate: &BeliefSnapshot, current: &BeliefSnapshot) -> Result<BeliefSnapshot> {
    fj_step_with_drift(params, innate, current).map(|(s, _)| s)
}

pub fn build_h(params: &FJParameters) -> SystemMatrix {
    let b = params.social_matrix();
    let n = params.n();
    SystemMatrix(DMatrix::from_fn(n, n, |i, j| (1.0 - params.gamma()[i]) * b[(i, j)]))
}

/// Spectral radius of `|H|` by power iteration.
///
/// Iterates on `|H| + I` (same Perron vector, eigenvalue shifted by one) to
/// break the periodicity of bipartite peer graphs. Stops when either the
/// eigen-residual or the Collatz-Wielandt bracket falls below `tol`.
pub fn spectral_radius(h: &SystemMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let a = h.0.abs();
    let n = a.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut x = DVector::from_element(n, 1.0);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let y = &a * &x + &x;
        let lambda = y.amax();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        residual = (&y - &x * lambda).amax();
        let (lo, hi) = x
            .iter()
            .zip(y.iter())
            .filter(|(xi, _)| **xi > 0.0)
            .map(|(xi, yi)| yi / xi)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
        if hi - lo < tol {
            return Ok((0.5 * (lo + hi) - 1.0).max(0.0));
        }
        x = y / lambda;
        if residual < tol {
            return Ok((lambda - 1.0).max(0.0));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Spectral radius when it is needed only to decide contractivity.
///
/// The max row sum bounds `rho(|H|)` and settles the common case without
/// iterating.
fn contraction_check(params: &FJParameters, h: &SystemMatrix) -> Result<()> {
    let row_bound = (0..h.0.nrows())
        .map(|i| h.0.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if row_bound < 1.0 - CONTRACTION_MARGIN {
        return Ok(());
    }
    if params.gamma().iter().all(|&g| g == 0.0) {
        // every row of H sums to 1, so rho = 1 exactly
        return Err(Error::NotContractive { rho: 1.0 });
    }
    let rho = spectral_radius(h, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)?;
    if rho >= 1.0 - CONTRACTION_MARGIN {
        return Err(Error::NotContractive { rho });
    }
    Ok(())
}

/// Solves `(I - H) B* = Gamma S` by LU with partial pivoting.
pub fn equilibrium(params: &FJParameters, innate: &BeliefSnapshot) -> Result<BeliefSnapshot> {
    if innate.n() != params.n() {
        return Err(Error::ShapeMismatch(format!(
            "parameters have {} agents, innate {}",
            params.n(),
            innate.n()
        )));
    }
    let h = build_h(params);
    contraction_check(params, &h)?;
    let n = params.n();
    let lhs = DMatrix::identity(n, n) - &h.0;
    let s = innate.to_matrix();
    let rhs = DMatrix::from_fn(n, innate.d(), |i, c| params.gamma()[i] * s[(i, c)]);
    let sol = lhs.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    BeliefSnapshot::from_matrix(&sol, ROW_STOCHASTIC_TOL)
}

/// How an equilibrium was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumMethod {
    LinearSolve,
    Iterated,
}

/// Closed-form equilibrium, falling back to [`FALLBACK_ROUNDS`] FJ rounds when
/// the system is not contractive. The fallback must settle (consecutive
/// rounds within 1e-9) or it reports `NotContractive`.
pub fn equilibrium_or_iterate(
    params: &FJParameters,
    innate: &BeliefSnapshot,
) -> Result<(BeliefSnapshot, EquilibriumMethod)> {
    match equilibrium(params, innate) {
        Ok(b) => Ok((b, EquilibriumMethod::LinearSolve)),
        Err(Error::NotContractive { rho }) => {
            let mut current = innate.clone();
            let mut change = f64::INFINITY;
            for _ in 0..FALLBACK_ROUNDS {
                let next = fj_step(params, innate, &current)?;
                change = next.max_abs_diff(&current);
                current = next;
                if change < 1e-12 {
                    break;
                }
            }
            if change < 1e-9 {
                Ok((current, EquilibriumMethod::Iterated))
            } else {
                Err(Error::NotContractive { rho })
            }
        }
        Err(e) => Err(e),
    }
}

/// `M = (I - H)^{-1} Gamma`, checked for row-stochasticity.
pub fn influence_weights(params: &FJParameters) -> Result<InfluenceMatrix> {
    let h = build_h(params);
    contraction_check(params, &h)?;
    let n = params.n();
    let lhs = DMatrix::identity(n, n) - &h.0;
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(params.gamma()));
    let m = lhs.lu().solve(&gamma).ok_or(Error::SingularSystem)?;
    for i in 0..n {
        let row_sum = m.row(i).sum();
        if (row_sum - 1.0).abs() > ROW_STOCHASTIC_TOL {
            return Err(Error::DegenerateStubbornness { agent: i, row_sum });
        }
    }
    Ok(InfluenceMatrix(m))
}

/// `pi^T = eta^T M`.
pub fn aggregate_pi(m: &InfluenceMatrix, eta: &[f64]) -> Result<AggregationWeights> {
    let n = m.0.nrows();
    check_simplex_weights(eta, n)?;
    let pi: Vec<f64> = (0..n).map(|j| (0..n).map(|i| eta[i] * m.0[(i, j)]).sum()).collect();
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > ROW_STOCHASTIC_TOL || pi.iter().any(|&x| x < -ROW_STOCHASTIC_TOL) {
        return Err(Error::WeightNotSimplex(format!("pi sums to {sum}")));
    }
    Ok(AggregationWeights { eta: eta.to_vec(), pi })
}

/// Uniform readout weights `1/n`.
pub fn uniform_eta(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Runs `rounds` FJ steps from the innate snapshot.
///
/// The largest per-round renormalization drift is recorded in metadata
/// under `max_drift` (comma-separated, one entry per round).
pub fn simulate(params: &FJParameters, innate: &BeliefSnapshot, rounds: usize) -> Result<DeliberationTrajectory> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    let mut snapshots = Vec::with_capacity(rounds + 1);
    let mut drifts = Vec::with_capacity(rounds);
    snapshots.push(innate.clone());
    for t in 0..rounds {
        let (next, drift) = fj_step_with_drift(params, innate, &snapshots[t])?;
        drifts.push(format!("{drift:e}"));
        snapshots.push(next);
    }
    let mut traj = DeliberationTrajectory::new(String::new(), snapshots, None)?;
    traj.metadata.insert("max_drift".into(), drifts.join(","));
    Ok(traj)
}

/// True when the simulator's simplex tolerance holds on every row of `s`.
pub fn on_simplex(s: &BeliefSnapshot) -> bool {
    s.rows()
        .iter()
        .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL && r.iter().all(|&x| x >= 0.0))
}
