//! Deliberation seen as a mixture of experts: local risks, routing regret,
//! ensemble waste and the conditions under which input-dependent routing
//! beats the best single agent or a fixed ensemble.
//!
//! Risks are Brier losses. An item carrying the law of its label uses the
//! exact conditional risk; otherwise the realized label is plugged in.

use crate::domain::{argmax_label, check_simplex_weights, BeliefSnapshot, FJParameters};
use crate::dynamics::{aggregate_pi, influence_weights};
use crate::error::{Error, Result};
use crate::metrics::{brier_loss, confidence, diversity};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub snapshot: BeliefSnapshot,
    pub label: usize,
    /// Routing weights attached to the item, used by [`Router::Provided`].
    pub routing: Option<Vec<f64>>,
    /// Distribution of the label given this snapshot, when known.
    pub label_law: Option<Vec<f64>>,
    /// Scenario region that produced the item.
    pub region: Option<usize>,
}

impl LabeledItem {
    pub fn new(snapshot: BeliefSnapshot, label: usize) -> Result<Self> {
        if label >= snapshot.d() {
            return Err(Error::LabelOutOfRange { label, d: snapshot.d() });
        }
        Ok(Self {
            snapshot,
            label,
            routing: None,
            label_law: None,
            region: None,
        })
    }

    pub fn with_label_law(mut self, law: Vec<f64>) -> Result<Self> {
        check_simplex_weights(&law, self.snapshot.d())
            .map_err(|e| Error::InvalidArgument(format!("label law: {e}")))?;
        self.label_law = Some(law);
        Ok(self)
    }

    pub fn with_routing(mut self, pi: Vec<f64>) -> Result<Self> {
        check_simplex_weights(&pi, self.snapshot.n())?;
        self.routing = Some(pi);
        Ok(self)
    }

    /// Brier loss of an arbitrary prediction against this item's label
    /// (expected under the label law when present).
    pub fn loss(&self, b: &[f64]) -> Result<f64> {
        match &self.label_law {
            None => brier_loss(b, self.label),
            Some(law) => {
                let mut acc = 0.0;
                for (y, &q) in law.iter().enumerate() {
                    if q > 0.0 {
                        acc += q * brier_loss(b, y)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn local_risks(&self) -> Result<Vec<f64>> {
        self.snapshot.rows().iter().map(|r| self.loss(r)).collect()
    }
}

/// Items sharing one agent count.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSnapshotSet {
    items: Vec<LabeledItem>,
}

impl LabeledSnapshotSet {
    pub fn new(items: Vec<LabeledItem>) -> Result<Self> {
        if let Some(first) = items.first() {
            let n = first.snapshot.n();
            if let Some((k, it)) = items.iter().enumerate().find(|(_, it)| it.snapshot.n() != n) {
                return Err(Error::ShapeMismatch(format!(
                    "item {k} has {} agents, item 0 has {n}",
                    it.snapshot.n()
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Agent count (0 when empty).
    pub fn n(&self) -> usize {
        self.items.first().map_or(0, |it| it.snapshot.n())
    }
}

/// Rule producing routing weights for an item.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Constant(Vec<f64>),
    ConfidenceSoftmax {
        beta: f64,
    },
    HardMaxConfidence,
    /// Weights stored on each item.
    Provided,
    /// One-hot at the agent with the lowest local risk. Uses the label,
    /// so only meaningful as a reference point.
    OracleMinRisk,
}

impl Router {
    /// Constant weights `pi = eta^T M` from fitted FJ parameters.
    pub fn from_fj(params: &FJParameters, eta: &[f64]) -> Result<Self> {
        let m = influence_weights(params)?;
        Ok(Router::Constant(aggregate_pi(&m, eta)?.pi))
    }

    pub fn weights(&self, item: &LabeledItem) -> Result<Vec<f64>> {
        let s = &item.snapshot;
        match self {
            Router::Constant(a) => {
                check_simplex_weights(a, s.n())?;
                Ok(a.clone())
            }
            Router::ConfidenceSoftmax { beta } => confidence_router(s, *beta),
            Router::HardMaxConfidence => Ok(one_hot(s.n(), most_confident(s))),
            Router::Provided => item
                .routing
                .clone()
                .ok_or_else(|| Error::InvalidArgument("item carries no routing weights".into())),
            Router::OracleMinRisk => Ok(one_hot(s.n(), argmin(&item.local_risks()?))),
        }
    }
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Lowest index among the minimizers.
fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v < x[best] {
            best = i;
        }
    }
    best
}

fn most_confident(s: &BeliefSnapshot) -> usize {
    let c: Vec<f64> = s.rows().iter().map(|r| confidence(r)).collect();
    argmax_label(&c)
}

fn weighted(a: &[f64], r: &[f64]) -> f64 {
    a.iter().zip(r).map(|(x, y)| x * y).sum()
}

fn min(r: &[f64]) -> f64 {
    r.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Per-agent Brier risk at one snapshot.
pub fn local_risk(s: &BeliefSnapshot, y: usize) -> Result<Vec<f64>> {
    s.rows().iter().map(|r| brier_loss(r, y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityCheck {
    /// Brier loss of the mixture.
    pub lhs: f64,
    /// Weighted agent risk minus diversity.
    pub rhs: f64,
    pub gap: f64,
}

/// Both sides of the ambiguity decomposition of the mixture loss.
pub fn ambiguity_check(s: &BeliefSnapshot, a: &[f64], y: usize) -> Result<AmbiguityCheck> {
    check_simplex_weights(a, s.n())?;
    let lhs = brier_loss(&s.mixture(a), y)?;
    let rhs = weighted(a, &local_risk(s, y)?) - diversity(s, a)?;
    Ok(AmbiguityCheck {
        lhs,
        rhs,
        gap: lhs - rhs,
    })
}

/// Excess risk of the router's weighting over the locally best agent.
pub fn routing_regret(s: &BeliefSnapshot, pi: &[f64], y: usize) -> Result<f64> {
    check_simplex_weights(pi, s.n())?;
    let r = local_risk(s, y)?;
    Ok((weighted(pi, &r) - min(&r)).max(0.0))
}

/// Same quantity for fixed ensemble weights.
pub fn ensemble_waste(s: &BeliefSnapshot, a: &[f64], y: usize) -> Result<f64> {
    routing_regret(s, a, y)
}

/// Softmax of confidences at inverse temperature `beta`.
pub fn confidence_router(s: &BeliefSnapshot, beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    let c: Vec<f64> = s.rows().iter().map(|r| confidence(r)).collect();
    Ok(softmax(&c, beta))
}

fn softmax(c: &[f64], beta: f64) -> Vec<f64> {
    if beta == 0.0 {
        return vec![1.0 / c.len() as f64; c.len()];
    }
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = c.iter().map(|x| (beta * (x - max)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingReport {
    /// Index of the agent with the lowest mean risk.
    pub best_single_agent: usize,
    pub mean_best_single_risk: f64,
    pub mean_min_local_risk: f64,
    pub specialization_gain: f64,
    pub mean_local_diversity: f64,
    pub mean_routing_regret: f64,
    /// Mean loss of the routed mixture.
    pub mean_moe_loss: f64,
    pub beats_single_agent: bool,
    /// Routed mixture against the uniform ensemble.
    pub beats_uniform_ensemble: bool,
    pub per_sample_condition: Vec<bool>,
    /// Routed mixture strictly beats the best single agent on the sample.
    pub per_sample_moe_wins: Vec<bool>,
    /// `confusion[c][w]`: c = condition held, w = mixture won.
    pub confusion: [[usize; 2]; 2],
}

struct SampleTerms {
    risks: Vec<f64>,
    pi: Vec<f64>,
    diversity: f64,
    regret: f64,
    moe_loss: f64,
}

fn sample_terms(item: &LabeledItem, router: &Router) -> Result<SampleTerms> {
    let risks = item.local_risks()?;
    let pi = router.weights(item)?;
    check_simplex_weights(&pi, item.snapshot.n())?;
    let diversity = diversity(&item.snapshot, &pi)?;
    let regret = (weighted(&pi, &risks) - min(&risks)).max(0.0);
    let moe_loss = item.loss(&item.snapshot.mixture(&pi))?;
    Ok(SampleTerms {
        risks,
        pi,
        diversity,
        regret,
        moe_loss,
    })
}

/// Whether routing beats the best single agent, in aggregate and per sample.
pub fn single_agent_comparison(data: &LabeledSnapshotSet, router: &Router) -> Result<RoutingReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = data.n();
    let k = data.len() as f64;
    let terms = data
        .items()
        .iter()
        .map(|it| sample_terms(it, router))
        .collect::<Result<Vec<_>>>()?;

    let mut mean_risk = vec![0.0; n];
    for t in &terms {
        for (m, r) in mean_risk.iter_mut().zip(&t.risks) {
            *m += r / k;
        }
    }
    let best = argmin(&mean_risk);

    let mut mean_min = 0.0;
    let mut mean_div = 0.0;
    let mut mean_regret = 0.0;
    let mut mean_moe = 0.0;
    let mut per_sample_condition = Vec::with_capacity(terms.len());
    let mut per_sample_moe_wins = Vec::with_capacity(terms.len());
    let mut confusion = [[0usize; 2]; 2];
    for t in &terms {
        let local_min = min(&t.risks);
        mean_min += local_min / k;
        mean_div += t.diversity / k;
        mean_regret += t.regret / k;
        mean_moe += t.moe_loss / k;
        let holds = (t.risks[best] - local_min) + t.diversity > t.regret;
        let wins = t.moe_loss < t.risks[best];
        per_sample_condition.push(holds);
        per_sample_moe_wins.push(wins);
        confusion[holds as usize][wins as usize] += 1;
    }
    let gain = (mean_risk[best] - mean_min).max(0.0);
    let uniform = vec![1.0 / n as f64; n];
    let vs_uniform = ensemble_comparison_from_terms(data, &uniform, &terms)?;
    Ok(RoutingReport {
        best_single_agent: best,
        mean_best_single_risk: mean_risk[best],
        mean_min_local_risk: mean_min,
        specialization_gain: gain,
        mean_local_diversity: mean_div,
        mean_routing_regret: mean_regret,
        mean_moe_loss: mean_moe,
        beats_single_agent: gain + mean_div > mean_regret,
        beats_uniform_ensemble: vs_uniform.holds,
        per_sample_condition,
        per_sample_moe_wins,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleComparison {
    /// Mean risk saved by routing: `E[sum_j (a_j - pi_j) r_j]`.
    pub lhs: f64,
    /// Mean diversity given up: `E[D_a - D_pi]`.
    pub rhs: f64,
    pub holds: bool,
    /// Mean loss of the fixed mixture minus mean loss of the routed one.
    pub realized_gap: f64,
}

/// Whether routing beats the fixed ensemble `a`.
pub fn ensemble_comparison(data: &LabeledSnapshotSet, a: &[f64], router: &Router) -> Result<EnsembleComparison> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_simplex_weights(a, data.n())?;
    let terms = data
        .items()
        .iter()
        .map(|it| sample_terms(it, router))
        .collect::<Result<Vec<_>>>()?;
    ensemble_comparison_from_terms(data, a, &terms)
}

fn ensemble_comparison_from_terms(
    data: &LabeledSnapshotSet,
    a: &[f64],
    terms: &[SampleTerms],
) -> Result<EnsembleComparison> {
    let k = data.len() as f64;
    let (mut lhs, mut rhs, mut gap) = (0.0, 0.0, 0.0);
    for (it, t) in data.items().iter().zip(terms) {
        let d_a = diversity(&it.snapshot, a)?;
        let fixed_loss = it.loss(&it.snapshot.mixture(a))?;
        lhs += a
            .iter()
            .zip(&t.pi)
            .zip(&t.risks)
            .map(|((x, p), r)| (x - p) * r)
            .sum::<f64>()
            / k;
        rhs += (d_a - t.diversity) / k;
        gap += (fixed_loss - t.moe_loss) / k;
    }
    Ok(EnsembleComparison {
        lhs,
        rhs,
        holds: lhs > rhs,
        realized_gap: gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceRoutingCheck {
    /// Mean waste `E[G_a]` of the fixed ensemble.
    pub g: f64,
    /// Mean regret of routing to the most confident agent.
    pub delta_c: f64,
    /// Mean diversity of the fixed ensemble.
    pub d_a: f64,
    pub holds: bool,
}

/// Whether hard routing to the most confident agent beats the fixed ensemble `a`.
pub fn confidence_routing_condition(data: &LabeledSnapshotSet, a: &[f64]) -> Result<ConfidenceRoutingCheck> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_simplex_weights(a, data.n())?;
    if data.n() < 2 {
        return Ok(ConfidenceRoutingCheck {
            g: 0.0,
            delta_c: 0.0,
            d_a: 0.0,
            holds: false,
        });
    }
    let k = data.len() as f64;
    let (mut g, mut delta_c, mut d_a) = (0.0, 0.0, 0.0);
    for it in data.items() {
        let r = it.local_risks()?;
        let m = min(&r);
        g += (weighted(a, &r) - m).max(0.0) / k;
        delta_c += (r[most_confident(&it.snapshot)] - m) / k;
        d_a += diversity(&it.snapshot, a)? / k;
    }
    Ok(ConfidenceRoutingCheck {
        g,
        delta_c,
        d_a,
        holds: g > delta_c + d_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(rows: &[&[f64]]) -> BeliefSnapshot {
        BeliefSnapshot::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn set(items: Vec<LabeledItem>) -> LabeledSnapshotSet {
        LabeledSnapshotSet::new(items).unwrap()
    }

    #[test]
    fn local_risk_examples() {
        let s = snap(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        assert_eq!(local_risk(&s, 0).unwrap(), vec![0.0, 2.0, 0.5]);
        assert!(matches!(local_risk(&s, 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ambiguity_examples() {
        let s = snap(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = ambiguity_check(&s, &[0.5, 0.5], 0).unwrap();
        assert!((c.lhs - 0.5).abs() < 1e-12);
        assert!((c.rhs - 0.5).abs() < 1e-12);
        assert!((diversity(&s, &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-12);

        let s = snap(&[&[0.6, 0.4], &[0.2, 0.8]]);
        let c = ambiguity_check(&s, &[0.0, 1.0], 1).unwrap();
        assert!((c.lhs - 0.08).abs() < 1e-12);
        assert!(c.gap.abs() < 1e-15);
        assert!(matches!(
            ambiguity_check(&s, &[0.7, 0.7], 1),
            Err(Error::WeightNotSimplex(_))
        ));
    }

    #[test]
    fn regret_examples() {
        let s = snap(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(routing_regret(&s, &[1.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(routing_regret(&s, &[0.5, 0.5], 0).unwrap(), 1.0);
        assert_eq!(ensemble_waste(&s, &[0.5, 0.5], 0).unwrap(), 1.0);
        let same = snap(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(routing_regret(&same, &[0.2, 0.8], 1).unwrap(), 0.0);
    }

    #[test]
    fn softmax_router_examples() {
        let s = snap(&[&[0.9, 0.1], &[0.5, 0.5]]);
        assert_eq!(confidence_router(&s, 0.0).unwrap(), vec![0.5, 0.5]);
        let pi = confidence_router(&s, 1.0).unwrap();
        assert!((pi[0] - 0.6297).abs() < 1e-4 && (pi[1] - 0.3703).abs() < 1e-4);
        let hard = confidence_router(&s, 1e6).unwrap();
        assert!((hard[0] - 1.0).abs() < 1e-9);
        assert!(confidence_router(&s, -1.0).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let c = [0.1, 0.4, 0.25];
        let shifted: Vec<f64> = c.iter().map(|x| x + 3.0).collect();
        let a = softmax(&c, 2.0);
        let b = softmax(&shifted, 2.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn single_agent_condition() {
        let data = set(vec![
            LabeledItem::new(snap(&[&[0.7, 0.3]]), 0).unwrap(),
            LabeledItem::new(snap(&[&[0.2, 0.8]]), 0).unwrap(),
        ]);
        let rep = single_agent_comparison(&data, &Router::Constant(vec![1.0])).unwrap();
        assert_eq!(rep.specialization_gain, 0.0);
        assert_eq!(rep.mean_local_diversity, 0.0);
        assert_eq!(rep.mean_routing_regret, 0.0);
        assert!(!rep.beats_single_agent);
        let c = confidence_routing_condition(&data, &[1.0]).unwrap();
        assert_eq!((c.g, c.delta_c, c.d_a, c.holds), (0.0, 0.0, 0.0, false));
        assert_eq!(
            single_agent_comparison(&set(vec![]), &Router::HardMaxConfidence),
            Err(Error::EmptyInput)
        );
    }

    #[test]
    fn oracle_routing_on_disjoint_competence() {
        // agent 0 is right on label 0, agent 1 on label 1
        let data = set(vec![
            LabeledItem::new(snap(&[&[1.0, 0.0], &[0.5, 0.5]]), 0).unwrap(),
            LabeledItem::new(snap(&[&[0.5, 0.5], &[0.0, 1.0]]), 1).unwrap(),
        ]);
        let rep = single_agent_comparison(&data, &Router::OracleMinRisk).unwrap();
        assert_eq!(rep.mean_routing_regret, 0.0);
        assert!(rep.beats_single_agent);
        assert!(rep.mean_moe_loss < rep.mean_best_single_risk);
        let cells: usize = rep.confusion.iter().flatten().sum();
        assert_eq!(cells, 2);
    }

    #[test]
    fn globally_best_router_reduces_to_gain() {
        let data = set(vec![
            LabeledItem::new(snap(&[&[0.9, 0.1], &[0.4, 0.6]]), 0).unwrap(),
            LabeledItem::new(snap(&[&[0.3, 0.7], &[0.6, 0.4]]), 1).unwrap(),
        ]);
        let rep = single_agent_comparison(&data, &Router::Constant(vec![1.0, 0.0])).unwrap();
        assert_eq!(rep.best_single_agent, 0);
        assert!((rep.mean_moe_loss - rep.mean_best_single_risk).abs() < 1e-15);
        assert_eq!(rep.mean_local_diversity, 0.0);
    }

    #[test]
    fn ensemble_comparison_identity_and_trivial_router() {
        let data = set(vec![
            LabeledItem::new(snap(&[&[0.9, 0.1], &[0.4, 0.6], &[0.2, 0.8]]), 0).unwrap(),
            LabeledItem::new(snap(&[&[0.3, 0.7], &[0.6, 0.4], &[0.5, 0.5]]), 1).unwrap(),
        ]);
        let a = vec![0.2, 0.5, 0.3];
        let same = ensemble_comparison(&data, &a, &Router::Constant(a.clone())).unwrap();
        assert_eq!((same.lhs, same.rhs, same.realized_gap), (0.0, 0.0, 0.0));
        assert!(!same.holds);
        let r = ensemble_comparison(&data, &a, &Router::ConfidenceSoftmax { beta: 3.0 }).unwrap();
        assert!(((r.lhs - r.rhs) - r.realized_gap).abs() < 1e-12);
        let hard = ensemble_comparison(&data, &a, &Router::HardMaxConfidence).unwrap();
        let full_da: f64 = data
            .items()
            .iter()
            .map(|it| diversity(&it.snapshot, &a).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((hard.rhs - full_da).abs() < 1e-15);
    }

    #[test]
    fn confidence_routing_calibration() {
        let calibrated = set(vec![
            LabeledItem::new(snap(&[&[0.95, 0.05], &[0.6, 0.4]]), 0).unwrap(),
            LabeledItem::new(snap(&[&[0.4, 0.6], &[0.05, 0.95]]), 1).unwrap(),
        ]);
        let c = confidence_routing_condition(&calibrated, &[0.5, 0.5]).unwrap();
        assert_eq!(c.delta_c, 0.0);

        // most confident agent is always confidently wrong
        let anti = set(vec![
            LabeledItem::new(snap(&[&[1.0, 0.0], &[0.0, 1.0]]), 1).unwrap(),
            LabeledItem::new(snap(&[&[1.0, 0.0], &[0.0, 1.0]]), 1).unwrap(),
        ]);
        let c = confidence_routing_condition(&anti, &[0.5, 0.5]).unwrap();
        assert_eq!(c.delta_c, 2.0);
        assert!(!c.holds);
    }

    #[test]
    fn exact_risk_under_label_law() {
        let it = LabeledItem::new(snap(&[&[0.5, 0.5], &[1.0, 0.0]]), 0)
            .unwrap()
            .with_label_law(vec![0.5, 0.5])
            .unwrap();
        assert_eq!(it.local_risks().unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn fitted_router_is_constant_pi() {
        let p = FJParameters::uniform(3, 0.5, 0.2, crate::domain::complete_mask(3)).unwrap();
        let Router::Constant(pi) = Router::from_fj(&p, &[1.0 / 3.0; 3]).unwrap() else {
            panic!("expected constant router")
        };
        for x in pi {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}
