//! Fitting FJ parameters to observed belief trajectories.
//!
//! The objective is the teacher-forced one-step error: round `t+1` is
//! predicted from the observed round `t`. Parameters are kept feasible by
//! construction: `gamma` and `alpha` pass through a logistic map and each
//! row of `W` is a softmax over the allowed edges of the mask. The
//! unconstrained logits are minimized with L-BFGS and an Armijo
//! backtracking line search, so every accepted step lowers the objective.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{uniform_weights, BeliefSnapshot, DeliberationTrajectory, FJParameters};
use crate::dynamics::fj_step;
use crate::error::{Error, Result};

/// Probability floor inside the KL objective.
pub const KL_FLOOR: f64 = 1e-12;
const FLAT_TOL: f64 = 1e-12;
const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const INIT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Mean over (agent, round) of `KL(observed || predicted)`.
    #[default]
    Kl,
    /// Mean over (agent, round, entry) of the squared prediction error.
    Mse,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Kl => "kl",
            Objective::Mse => "mse",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Objective::Kl),
            "mse" => Ok(Objective::Mse),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub objective: Objective,
    pub max_iters: usize,
    /// Initial step length of the first line search after a (re)start.
    pub step_size: f64,
    pub restarts: usize,
    /// Pull of `W` toward uniform and of `gamma`, `alpha` toward 1/2.
    pub reg_lambda: f64,
    pub seed: u64,
    /// Stop once the gradient sup-norm falls below this.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Kl,
            max_iters: 2000,
            step_size: 1.0,
            restarts: 5,
            reg_lambda: 1e-3,
            seed: 0,
            tol: 1e-12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || self.restarts < 1 {
            return Err(Error::InvalidArgument("max_iters and restarts must be >= 1".into()));
        }
        if !(self.tol > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("tol and step_size must be positive".into()));
        }
        if !(self.reg_lambda >= 0.0) {
            return Err(Error::InvalidArgument("reg_lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: FJParameters,
    /// Unregularized KL of the fitted parameters.
    pub kl: f64,
    /// Unregularized MSE of the fitted parameters.
    pub mse: f64,
    /// Final value of the minimized (regularized) objective.
    pub objective: f64,
    /// Objective after each accepted step of the winning restart.
    pub objective_curve: Vec<f64>,
    pub restart_index: usize,
    pub iterations: usize,
    /// The data term is constant in the parameters; the regularizer alone
    /// picked the reported parameters.
    pub flat: bool,
}

/// Teacher-forced predictions of rounds `1..=T`.
pub fn one_step_predictions(params: &FJParameters, traj: &DeliberationTrajectory) -> Result<Vec<BeliefSnapshot>> {
    let innate = traj.innate();
    traj.snapshots[..traj.snapshots.len() - 1]
        .iter()
        .map(|current| fj_step(params, innate, current))
        .collect()
}

fn kl_divergence(observed: &[f64], predicted: &[f64]) -> f64 {
    observed
        .iter()
        .zip(predicted)
        .filter(|(o, _)| **o > 0.0)
        .map(|(&o, &p)| o * (o.ln() - p.max(KL_FLOOR).ln()))
        .sum()
}

/// Unregularized one-step objective.
pub fn fit_objective(params: &FJParameters, traj: &DeliberationTrajectory, objective: Objective) -> Result<f64> {
    if traj.rounds() < 1 {
        return Err(Error::InvalidArgument(
            "trajectory needs at least one transition".into(),
        ));
    }
    let preds = one_step_predictions(params, traj)?;
    let (n, d, t) = (traj.n(), traj.d(), traj.rounds());
    let mut acc = 0.0;
    for (pred, obs) in preds.iter().zip(&traj.snapshots[1..]) {
        for (p, o) in pred.rows().iter().zip(obs.rows()) {
            acc += match objective {
                Objective::Kl => kl_divergence(o, p),
                Objective::Mse => p.iter().zip(o.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
            };
        }
    }
    Ok(match objective {
        Objective::Kl => acc / (n * t) as f64,
        Objective::Mse => acc / (n * t * d) as f64,
    })
}

/// `lambda (||W - W_unif||_F^2 + ||gamma - 1/2||^2 + ||alpha - 1/2||^2)`.
pub fn regularization(params: &FJParameters, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let wu = uniform_weights(params.mask());
    let w_term = (params.w() - wu).norm_squared();
    let g_term: f64 = params.gamma().iter().map(|g| (g - 0.5).powi(2)).sum();
    let a_term: f64 = params.alpha().iter().map(|a| (a - 0.5).powi(2)).sum();
    lambda * (w_term + g_term + a_term)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps unconstrained logits to feasible parameters.
struct Layout {
    n: usize,
    mask: DMatrix<bool>,
    edges: Vec<Vec<usize>>,
}

struct Grads {
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    w: DMatrix<f64>,
}

impl Grads {
    fn zeros(n: usize) -> Self {
        Self {
            gamma: vec![0.0; n],
            alpha: vec![0.0; n],
            w: DMatrix::zeros(n, n),
        }
    }
}

impl Layout {
    fn new(mask: &DMatrix<bool>) -> Self {
        let n = mask.nrows();
        let edges = (0..n).map(|i| (0..n).filter(|&j| mask[(i, j)]).collect()).collect();
        Self {
            n,
            mask: mask.clone(),
            edges,
        }
    }

    fn dim(&self) -> usize {
        2 * self.n + self.edges.iter().map(Vec::len).sum::<usize>()
    }

    fn decode(&self, theta: &[f64]) -> Result<FJParameters> {
        let n = self.n;
        let gamma = theta[..n].iter().map(|&x| sigmoid(x)).collect();
        let alpha = theta[n..2 * n].iter().map(|&x| sigmoid(x)).collect();
        let mut w = DMatrix::zeros(n, n);
        let mut k = 2 * n;
        for (i, row) in self.edges.iter().enumerate() {
            let logits = &theta[k..k + row.len()];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&j, e) in row.iter().zip(&exps) {
                w[(i, j)] = e / z;
            }
            k += row.len();
        }
        FJParameters::new(gamma, alpha, w, self.mask.clone())
    }

    /// Chain rule from parameter-space gradients to logit gradients.
    fn pull_back(&self, params: &FJParameters, g: &Grads) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.dim());
        out.extend((0..n).map(|i| {
            let x = params.gamma()[i];
            g.gamma[i] * x * (1.0 - x)
        }));
        out.extend((0..n).map(|i| {
            let x = params.alpha()[i];
            g.alpha[i] * x * (1.0 - x)
        }));
        let w = params.w();
        for (i, row) in self.edges.iter().enumerate() {
            let inner: f64 = row.iter().map(|&j| w[(i, j)] * g.w[(i, j)]).sum();
            out.extend(row.iter().map(|&k| w[(i, k)] * (g.w[(i, k)] - inner)));
        }
        out
    }
}

/// Adds `scale` times the data term of one trajectory (and its gradient).
fn accumulate_data_term(
    params: &FJParameters,
    traj: &DeliberationTrajectory,
    objective: Objective,
    scale: f64,
    grads: &mut Grads,
) -> f64 {
    let (n, d, t_len) = (traj.n(), traj.d(), traj.rounds());
    let norm = match objective {
        Objective::Kl => (n * t_len) as f64,
        Objective::Mse => (n * t_len * d) as f64,
    };
    let w_eff = params.effective_w();
    let s = traj.innate();
    let mut loss = 0.0;
    let mut peer = vec![0.0; d];
    let mut gp = vec![0.0; d];
    for t in 0..t_len {
        let cur = &traj.snapshots[t];
        let obs = &traj.snapshots[t + 1];
        for i in 0..n {
            let (g, a) = (params.gamma()[i], params.alpha()[i]);
            peer.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                let wij = w_eff[(i, j)];
                if wij != 0.0 {
                    for (p, &x) in peer.iter_mut().zip(cur.row(j).iter()) {
                        *p += wij * x;
                    }
                }
            }
            let (si, bi, oi) = (s.row(i), cur.row(i), obs.row(i));
            for c in 0..d {
                let q = a * bi[c] + (1.0 - a) * peer[c];
                let p = g * si[c] + (1.0 - g) * q;
                match objective {
                    Objective::Mse => {
                        let e = p - oi[c];
                        loss += e * e;
                        gp[c] = 2.0 * e / norm;
                    }
                    Objective::Kl => {
                        let o = oi[c];
                        if o > 0.0 {
                            loss += o * (o.ln() - p.max(KL_FLOOR).ln());
                            gp[c] = if p > KL_FLOOR { -o / p / norm } else { 0.0 };
                        } else {
                            gp[c] = 0.0;
                        }
                    }
                }
                let q_c = q;
                grads.gamma[i] += scale * gp[c] * (si[c] - q_c);
                grads.alpha[i] += scale * gp[c] * (1.0 - g) * (bi[c] - peer[c]);
            }
            if !params.is_isolated(i) {
                let coef = (1.0 - g) * (1.0 - a);
                for j in 0..n {
                    if params.mask()[(i, j)] {
                        let bj = cur.row(j);
                        let dot: f64 = gp.iter().zip(bj.iter()).map(|(x, y)| x * y).sum();
                        grads.w[(i, j)] += scale * coef * dot;
                    }
                }
            }
        }
    }
    scale * loss / norm
}

fn accumulate_regularizer(params: &FJParameters, lambda: f64, grads: &mut Grads) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let wu = uniform_weights(params.mask());
    let n = params.n();
    for i in 0..n {
        grads.gamma[i] += 2.0 * lambda * (params.gamma()[i] - 0.5);
        grads.alpha[i] += 2.0 * lambda * (params.alpha()[i] - 0.5);
        for j in 0..n {
            grads.w[(i, j)] += 2.0 * lambda * (params.w()[(i, j)] - wu[(i, j)]);
        }
    }
    regularization(params, lambda)
}

/// Mean data term over `trajs` plus the regularizer, with logit gradient.
fn evaluate(
    layout: &Layout,
    theta: &[f64],
    trajs: &[&DeliberationTrajectory],
    cfg: &FitConfig,
) -> Result<(f64, Vec<f64>)> {
    let params = layout.decode(theta)?;
    let mut grads = Grads::zeros(layout.n);
    let scale = 1.0 / trajs.len() as f64;
    let mut f = 0.0;
    for traj in trajs {
        f += accumulate_data_term(&params, traj, cfg.objective, scale, &mut grads);
    }
    f += accumulate_regularizer(&params, cfg.reg_lambda, &mut grads);
    Ok((f, layout.pull_back(&params, &grads)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Minimum {
    theta: Vec<f64>,
    value: f64,
    curve: Vec<f64>,
    iterations: usize,
}

/// L-BFGS with Armijo backtracking. Accepted steps strictly decrease `f`.
fn lbfgs<F>(mut f: F, x0: Vec<f64>, cfg: &FitConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut curve = vec![fx];
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut stalls = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        if sup_norm(&g) < cfg.tol {
            break;
        }
        // two-loop recursion
        let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let scale = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= scale);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if hist.is_empty() {
            cfg.step_size / sup_norm(&dir).max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fn_, gn) = f(&xn)?;
            if fn_.is_finite() && fn_ <= fx + ARMIJO_C1 * step * slope && fn_ < fx {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > LBFGS_MEMORY {
                hist.pop_front();
            }
        }
        stalls = if fx - fn_ <= f64::EPSILON * fx.abs() {
            stalls + 1
        } else {
            0
        };
        x = xn;
        fx = fn_;
        g = gn;
        curve.push(fx);
        if stalls >= 3 {
            break;
        }
    }
    Ok(Minimum {
        theta: x,
        value: fx,
        curve,
        iterations,
    })
}

fn is_flat(traj: &DeliberationTrajectory) -> bool {
    let reference = traj.innate().row(0);
    traj.snapshots.iter().all(|s| {
        s.rows()
            .iter()
            .all(|r| r.iter().zip(reference.iter()).all(|(a, b)| (a - b).abs() <= FLAT_TOL))
    })
}

fn check_trajectory(traj: &DeliberationTrajectory) -> Result<()> {
    if traj.n() < 2 {
        return Err(Error::TooFewAgents(traj.n()));
    }
    if traj.rounds() < 1 {
        return Err(Error::InvalidArgument(format!(
            "trajectory {:?} needs at least one transition",
            traj.sample_id
        )));
    }
    Ok(())
}

fn initial_logits(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| INIT_SCALE * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

fn fit_pool(trajs: &[&DeliberationTrajectory], mask: &DMatrix<bool>, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let flat = trajs.iter().all(|t| is_flat(t));
    if flat && cfg.reg_lambda == 0.0 {
        return Err(Error::DegenerateTrajectory);
    }
    let layout = Layout::new(mask);
    let mut best: Option<(usize, Minimum)> = None;
    for r in 0..cfg.restarts {
        let x0 = initial_logits(layout.dim(), cfg.seed.wrapping_add(r as u64));
        let min = lbfgs(|theta| evaluate(&layout, theta, trajs, cfg), x0, cfg)?;
        if best.as_ref().is_none_or(|(_, b)| min.value < b.value) {
            best = Some((r, min));
        }
    }
    let (restart_index, min) = best.expect("restarts >= 1");
    let params = layout.decode(&min.theta)?;
    let k = trajs.len() as f64;
    let mut kl = 0.0;
    let mut mse = 0.0;
    for t in trajs {
        kl += fit_objective(&params, t, Objective::Kl)? / k;
        mse += fit_objective(&params, t, Objective::Mse)? / k;
    }
    Ok(FitReport {
        params,
        kl,
        mse,
        objective: min.value,
        objective_curve: min.curve,
        restart_index,
        iterations: min.iterations,
        flat,
    })
}

/// Per-sample fit on the complete graph over the trajectory's agents.
pub fn fit_sample(traj: &DeliberationTrajectory, cfg: &FitConfig) -> Result<FitReport> {
    fit_sample_masked(traj, &crate::domain::complete_mask(traj.n()), cfg)
}

/// Per-sample fit restricted to the edges of `mask`.
pub fn fit_sample_masked(traj: &DeliberationTrajectory, mask: &DMatrix<bool>, cfg: &FitConfig) -> Result<FitReport> {
    check_trajectory(traj)?;
    if mask.shape() != (traj.n(), traj.n()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} for {} agents",
            mask.shape(),
            traj.n()
        )));
    }
    fit_pool(&[traj], mask, cfg)
}

/// One parameter set shared by every trajectory, minimizing the mean
/// per-sample objective. `kl` and `mse` in the report are pool means.
pub fn fit_global(trajs: &[DeliberationTrajectory], cfg: &FitConfig) -> Result<FitReport> {
    let first = trajs.first().ok_or(Error::EmptyInput)?;
    for t in trajs {
        check_trajectory(t)?;
        if t.n() != first.n() {
            return Err(Error::ShapeMismatch(format!(
                "sample {:?} has {} agents, {:?} has {}",
                t.sample_id,
                t.n(),
                first.sample_id,
                first.n()
            )));
        }
    }
    let refs: Vec<&DeliberationTrajectory> = trajs.iter().collect();
    fit_pool(&refs, &crate::domain::complete_mask(first.n()), cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispersion {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityReport {
    /// `gamma[i]`, `alpha[i]`, then `w_in[j]` (weight agent j receives,
    /// averaged over its senders), in agent order.
    pub per_parameter: Vec<Dispersion>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn dispersion(name: String, mut values: Vec<f64>) -> Dispersion {
    values.sort_by(f64::total_cmp);
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    Dispersion {
        name,
        mean,
        std: var.sqrt(),
        iqr: quantile(&values, 0.75) - quantile(&values, 0.25),
    }
}

/// Weight each agent receives, averaged over the agents allowed to send to it.
pub fn incoming_weights(params: &FJParameters) -> Vec<f64> {
    let n = params.n();
    (0..n)
        .map(|j| {
            let senders: Vec<usize> = (0..n).filter(|&i| params.mask()[(i, j)]).collect();
            if senders.is_empty() {
                0.0
            } else {
                senders.iter().map(|&i| params.w()[(i, j)]).sum::<f64>() / senders.len() as f64
            }
        })
        .collect()
}

/// Spread of fitted parameters across samples.
pub fn parameter_variability(reports: &[FitReport]) -> Result<VariabilityReport> {
    if reports.len() < 2 {
        return Err(Error::InsufficientSamples(reports.len()));
    }
    let n = reports[0].params.n();
    if let Some(r) = reports.iter().find(|r| r.params.n() != n) {
        return Err(Error::ShapeMismatch(format!(
            "reports have {} and {n} agents",
            r.params.n()
        )));
    }
    let incoming: Vec<Vec<f64>> = reports.iter().map(|r| incoming_weights(&r.params)).collect();
    let mut per_parameter = Vec::with_capacity(3 * n);
    for i in 0..n {
        per_parameter.push(dispersion(
            format!("gamma[{i}]"),
            reports.iter().map(|r| r.params.gamma()[i]).collect(),
        ));
    }
    for i in 0..n {
        per_parameter.push(dispersion(
            format!("alpha[{i}]"),
            reports.iter().map(|r| r.params.alpha()[i]).collect(),
        ));
    }
    for j in 0..n {
        per_parameter.push(dispersion(
            format!("w_in[{j}]"),
            incoming.iter().map(|w| w[j]).collect(),
        ));
    }
    Ok(VariabilityReport { per_parameter })
}
