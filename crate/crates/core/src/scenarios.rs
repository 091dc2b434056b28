//! Synthetic competence scenarios with closed-form losses.
//!
//! In the exclusive scenario each agent is competent on its own region of
//! the input space and uniform elsewhere. In the imperfect scenario the
//! non-competent agents agree on a shared wrong label, so a fixed ensemble
//! is misled while routing to the most confident agent is not.
//!
//! Sample `k` of a dataset is drawn from its own ChaCha stream keyed by
//! `(seed, k)`, so datasets are reproducible and any prefix is stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{check_simplex_weights, BeliefSnapshot};
use crate::error::{Error, Result};
use crate::metrics::{confidence, log_loss, LOG_LOSS_FLOOR};
use crate::routing::{LabeledItem, LabeledSnapshotSet};

const BALANCE_TOL: f64 = 1e-12;
// keeps the misrouting draws independent of the generation stream
const ROUTE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_region<R: Rng>(rng: &mut R, rho: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &r) in rho.iter().enumerate() {
        if r > 0.0 {
            acc += r;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

fn peaked_row(d: usize, label: usize, p: f64) -> Vec<f64> {
    let rest = (1.0 - p) / (d - 1) as f64;
    (0..d).map(|c| if c == label { p } else { rest }).collect()
}

fn mean_log_loss(rows: impl Iterator<Item = (Vec<f64>, usize)>) -> Result<f64> {
    let mut acc = 0.0;
    let mut k = 0usize;
    for (b, y) in rows {
        acc += log_loss(&b, y, LOG_LOSS_FLOOR)?;
        k += 1;
    }
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(acc / k as f64)
}

/// Agent `j` is competent (mass `p = 1 - epsilon` on the truth) on region
/// `j`, which has probability `rho[j]`; everywhere else it is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ExclusiveScenario {
    pub n: usize,
    pub d: usize,
    pub rho: Vec<f64>,
    pub epsilon: f64,
}

impl ExclusiveScenario {
    pub fn new(n: usize, d: usize, rho: Vec<f64>, epsilon: f64) -> Result<Self> {
        let sc = Self { n, d, rho, epsilon };
        sc.validate()?;
        Ok(sc)
    }

    pub fn balanced(n: usize, d: usize, epsilon: f64) -> Result<Self> {
        Self::new(n, d, vec![1.0 / n as f64; n], epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidScenario("need at least one agent".into()));
        }
        if self.d < 2 {
            return Err(Error::InvalidScenario(format!("need d >= 2, got {}", self.d)));
        }
        let upper = 1.0 - 1.0 / self.d as f64;
        if !(self.epsilon > 0.0 && self.epsilon < upper) {
            return Err(Error::InvalidScenario(format!(
                "epsilon {} outside (0, {upper})",
                self.epsilon
            )));
        }
        check_simplex_weights(&self.rho, self.n).map_err(|e| Error::InvalidScenario(format!("rho: {e}")))?;
        if self.rho.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidScenario("rho has a negative entry".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn u(&self) -> f64 {
        1.0 / self.d as f64
    }

    pub fn is_balanced(&self) -> bool {
        let target = 1.0 / self.n as f64;
        self.rho.iter().all(|r| (r - target).abs() <= BALANCE_TOL)
    }

    /// Ensemble loss `-sum_j rho_j ln(u + (p - u) a_j)`.
    pub fn ensemble_loss(&self, a: &[f64]) -> Result<f64> {
        check_simplex_weights(a, self.n)?;
        let (p, u) = (self.p(), self.u());
        Ok(self
            .rho
            .iter()
            .zip(a)
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, w)| -r * (u + (p - u) * w).ln())
            .sum())
    }

    /// Loss of routing that picks a wrong (uniform) agent with probability `delta`.
    pub fn route_loss(&self, delta: f64) -> f64 {
        -(1.0 - delta) * self.p().ln() - delta * self.u().ln()
    }
}

pub fn gen_exclusive(sc: &ExclusiveScenario, samples: usize, seed: u64) -> Result<LabeledSnapshotSet> {
    sc.validate()?;
    let (n, d, p) = (sc.n, sc.d, sc.p());
    let uniform = vec![1.0 / d as f64; d];
    let items = (0..samples)
        .map(|idx| {
            let mut rng = sample_rng(seed, idx);
            let region = draw_region(&mut rng, &sc.rho);
            let label = rng.random_range(0..d);
            let rows = (0..n)
                .map(|j| {
                    if j == region {
                        peaked_row(d, label, p)
                    } else {
                        uniform.clone()
                    }
                })
                .collect();
            let mut item = LabeledItem::new(BeliefSnapshot::from_rows(rows)?, label)?;
            item.region = Some(region);
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSnapshotSet::new(items)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExclusiveLosses {
    pub l_ens: f64,
    pub l_moe: f64,
    /// `ln p - ln(u + (p - u)/n)`, only for balanced regions.
    pub gap_balanced: Option<f64>,
    /// Advantage over the agent with the largest region.
    pub gap_single: f64,
}

pub fn exclusive_losses(sc: &ExclusiveScenario, a: &[f64]) -> Result<ExclusiveLosses> {
    sc.validate()?;
    let (p, u) = (sc.p(), sc.u());
    let l_ens = sc.ensemble_loss(a)?;
    let gap_balanced = sc.is_balanced().then(|| p.ln() - (u + (p - u) / sc.n as f64).ln());
    let rho_max = sc.rho.iter().copied().fold(0.0, f64::max);
    Ok(ExclusiveLosses {
        l_ens,
        l_moe: -p.ln(),
        gap_balanced,
        gap_single: (1.0 - rho_max) * (p / u).ln(),
    })
}

/// Fixed weights minimizing the ensemble loss.
///
/// The optimum has the water-filling form `a_j = max(0, t rho_j - u/(p-u))`
/// with `t` set by `sum a = 1`; agents are activated in decreasing `rho`.
pub fn optimal_fixed_ensemble(sc: &ExclusiveScenario) -> Result<Vec<f64>> {
    sc.validate()?;
    let kappa = sc.u() / (sc.p() - sc.u());
    let mut order: Vec<usize> = (0..sc.n).filter(|&j| sc.rho[j] > 0.0).collect();
    order.sort_by(|&a, &b| sc.rho[b].total_cmp(&sc.rho[a]).then(a.cmp(&b)));
    let mut active = 0;
    let mut mass = 0.0;
    let mut t = 0.0;
    for (k, &j) in order.iter().enumerate() {
        let cand_mass = mass + sc.rho[j];
        let cand_t = (1.0 + (k + 1) as f64 * kappa) / cand_mass;
        if k > 0 && sc.rho[j] * cand_t - kappa <= 0.0 {
            break;
        }
        active = k + 1;
        mass = cand_mass;
        t = cand_t;
    }
    let mut a = vec![0.0; sc.n];
    for &j in &order[..active] {
        a[j] = (sc.rho[j] * t - kappa).max(0.0);
    }
    let z: f64 = a.iter().sum();
    a.iter_mut().for_each(|x| *x /= z);
    Ok(a)
}

/// Whether routing beats the best fixed ensemble. Needs every region to
/// have positive mass.
pub fn moe_advantage_check(sc: &ExclusiveScenario) -> Result<bool> {
    sc.validate()?;
    if sc.n < 2 {
        return Err(Error::InvalidScenario("need at least two agents".into()));
    }
    if sc.rho.iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidScenario("every region needs positive mass".into()));
    }
    let best = sc.ensemble_loss(&optimal_fixed_ensemble(sc)?)?;
    Ok(-sc.p().ln() < best)
}

/// Misrouting rate at which routing loses its edge over the uniform ensemble.
pub fn routing_error_threshold(sc: &ExclusiveScenario) -> Result<f64> {
    sc.validate()?;
    if !sc.is_balanced() {
        return Err(Error::UnbalancedScenario);
    }
    let (p, u) = (sc.p(), sc.u());
    Ok((p.ln() - (u + (p - u) / sc.n as f64).ln()) / (p.ln() - u.ln()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloLosses {
    pub l_ens: f64,
    pub l_moe: f64,
}

/// Empirical ensemble loss under weights `a` and empirical loss of routing
/// to the most confident agent.
pub fn mc_exclusive_losses(data: &LabeledSnapshotSet, a: &[f64]) -> Result<MonteCarloLosses> {
    let l_ens = mean_log_loss(data.items().iter().map(|it| (it.snapshot.mixture(a), it.label)))?;
    let l_moe = mean_log_loss(data.items().iter().map(|it| {
        let j = most_confident(&it.snapshot);
        (it.snapshot.row(j).to_vec(), it.label)
    }))?;
    Ok(MonteCarloLosses { l_ens, l_moe })
}

fn most_confident(s: &BeliefSnapshot) -> usize {
    let c: Vec<f64> = s.rows().iter().map(|r| confidence(r)).collect();
    crate::domain::argmax_label(&c)
}

/// Empirical routing loss when each sample is misrouted with probability
/// `delta`. The misrouting uniforms are common across `delta` values.
pub struct MisroutedLoss<'a> {
    data: &'a LabeledSnapshotSet,
    draws: Vec<(f64, usize)>,
}

impl<'a> MisroutedLoss<'a> {
    pub fn new(data: &'a LabeledSnapshotSet, seed: u64) -> Result<Self> {
        let n = data.n();
        if n < 2 {
            return Err(Error::InvalidScenario("misrouting needs at least two agents".into()));
        }
        let draws = (0..data.len())
            .map(|idx| {
                let mut rng = sample_rng(seed ^ ROUTE_SEED_SALT, idx);
                (rng.random::<f64>(), rng.random_range(0..n - 1))
            })
            .collect();
        Ok(Self { data, draws })
    }

    pub fn loss(&self, delta: f64) -> Result<f64> {
        mean_log_loss(self.data.items().iter().zip(&self.draws).map(|(it, &(u, k))| {
            let right = most_confident(&it.snapshot);
            let j = if u < delta {
                if k >= right {
                    k + 1
                } else {
                    k
                }
            } else {
                right
            };
            (it.snapshot.row(j).to_vec(), it.label)
        }))
    }
}

/// Bisection for the misrouting rate where the empirical routing loss meets
/// the empirical loss of the optimal fixed ensemble.
pub fn mc_routing_crossover(sc: &ExclusiveScenario, samples: usize, seed: u64, tol: f64) -> Result<f64> {
    let data = gen_exclusive(sc, samples, seed)?;
    let a = optimal_fixed_ensemble(sc)?;
    let target = mc_exclusive_losses(&data, &a)?.l_ens;
    let routed = MisroutedLoss::new(&data, seed)?;
    let (mut lo, mut hi) = (0.0, 1.0);
    if routed.loss(lo)? >= target || routed.loss(hi)? <= target {
        return Err(Error::InvalidScenario(
            "routing loss does not cross the ensemble loss on [0, 1]".into(),
        ));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if routed.loss(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One competent agent per region with mass `p` on the truth; every other
/// agent puts `u` on the truth and `c` on a shared wrong label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImperfectScenario {
    pub n: usize,
    pub d: usize,
    pub p: f64,
    pub u: f64,
    pub c: f64,
}

impl ImperfectScenario {
    pub fn new(n: usize, d: usize, p: f64, u: f64, c: f64) -> Result<Self> {
        let sc = Self { n, d, p, u, c };
        sc.validate()?;
        Ok(sc)
    }

    fn describe(&self) -> String {
        format!("n={} d={} p={} u={} c={}", self.n, self.d, self.p, self.u, self.c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidScenario(format!("{why} ({})", self.describe())));
        if self.n < 3 {
            return bad("need at least three agents");
        }
        if self.d < 2 {
            return bad("need d >= 2");
        }
        let inv_d = 1.0 / self.d as f64;
        if !(self.p > inv_d && self.p < 1.0) {
            return bad("p must lie in (1/d, 1)");
        }
        if !(self.u > 0.0 && self.u < inv_d) {
            return bad("u must lie in (0, 1/d)");
        }
        if !(self.c > self.u) {
            return bad("c must exceed u");
        }
        if self.d == 2 {
            if (self.c - (1.0 - self.u)).abs() > 1e-12 {
                return bad("with d = 2, c must equal 1 - u");
            }
        } else if self.u + self.c > 1.0 {
            return bad("u + c exceeds 1");
        }
        Ok(())
    }

    /// Shared wrong label for truth `y`.
    pub fn wrong_label(&self, y: usize) -> usize {
        (y + 1) % self.d
    }

    pub fn competent_row(&self, y: usize) -> Vec<f64> {
        peaked_row(self.d, y, self.p)
    }

    pub fn misled_row(&self, y: usize) -> Vec<f64> {
        let z = self.wrong_label(y);
        if self.d == 2 {
            let mut row = vec![0.0; 2];
            row[y] = self.u;
            row[z] = 1.0 - self.u;
            return row;
        }
        let rest = (1.0 - self.u - self.c) / (self.d - 2) as f64;
        (0..self.d)
            .map(|l| {
                if l == y {
                    self.u
                } else if l == z {
                    self.c
                } else {
                    rest
                }
            })
            .collect()
    }

    /// Uniform-ensemble mass on the shared wrong label beats its mass on the truth.
    pub fn wrong_majority(&self) -> bool {
        let m = (self.n - 1) as f64;
        (1.0 - self.p) / (self.d - 1) as f64 + m * self.c > self.p + m * self.u
    }

    pub fn check_confidence_order(&self) -> Result<()> {
        let competent = confidence(&self.competent_row(0));
        let other = confidence(&self.misled_row(0));
        if competent > other {
            Ok(())
        } else {
            Err(Error::ConfidenceOrderViolated {
                competent,
                other,
                params: self.describe(),
            })
        }
    }
}

pub fn gen_imperfect(sc: &ImperfectScenario, samples: usize, seed: u64) -> Result<LabeledSnapshotSet> {
    sc.validate()?;
    sc.check_confidence_order()?;
    let items = (0..samples)
        .map(|idx| {
            let mut rng = sample_rng(seed, idx);
            let region = rng.random_range(0..sc.n);
            let label = rng.random_range(0..sc.d);
            let rows = (0..sc.n)
                .map(|j| {
                    if j == region {
                        sc.competent_row(label)
                    } else {
                        sc.misled_row(label)
                    }
                })
                .collect();
            let mut item = LabeledItem::new(BeliefSnapshot::from_rows(rows)?, label)?;
            item.region = Some(region);
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSnapshotSet::new(items)
}

/// Log-loss advantage of confidence routing over the uniform ensemble.
pub fn imperfect_gap(sc: &ImperfectScenario) -> Result<f64> {
    sc.validate()?;
    let n = sc.n as f64;
    let gap = (sc.p / ((sc.p + (n - 1.0) * sc.u) / n)).ln();
    if !(gap > 0.0) {
        return Err(Error::InvalidScenario(format!("non-positive gap {gap}")));
    }
    Ok(gap)
}
