//! Per-agent and per-system deliberation metrics: confidence, influence,
//! alignment, competence, losses, diversity and rank correlation.

use crate::domain::{
    argmax_label, check_simplex_weights, AggregationWeights, BeliefSnapshot, DeliberationTrajectory, FJParameters,
};
use crate::dynamics::{aggregate_pi, influence_weights, uniform_eta};
use crate::error::{Error, Result};

/// Probabilities below this are treated as zero in entropy terms.
pub const ENTROPY_ZERO: f64 = 1e-15;
pub const LOG_LOSS_FLOOR: f64 = 1e-12;
pub const DEFAULT_CONSENSUS_THRESHOLD: f64 = 0.05;

/// `1 - H(b) / ln d`: 0 for the uniform belief, 1 for a point mass.
pub fn confidence(b: &[f64]) -> f64 {
    let d = b.len();
    if d < 2 {
        return 1.0;
    }
    let neg_entropy: f64 = b.iter().filter(|&&x| x > ENTROPY_ZERO).map(|&x| x * x.ln()).sum();
    (1.0 + neg_entropy / (d as f64).ln()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMetrics {
    pub confidence: Vec<f64>,
    /// Confidence relative to the second most confident agent.
    pub relative: Vec<f64>,
}

fn second_largest(v: &[f64]) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[1]
}

/// Confidence `C_j` and relative confidence `C_j / C_(n-1)`.
///
/// When the second-largest confidence is zero every relative confidence is 1.
pub fn confidence_metrics(s: &BeliefSnapshot) -> Result<ConfidenceMetrics> {
    if s.n() < 2 {
        return Err(Error::TooFewAgents(s.n()));
    }
    let confidence: Vec<f64> = s.rows().iter().map(|r| confidence(r)).collect();
    let denom = second_largest(&confidence);
    let relative = if denom == 0.0 {
        vec![1.0; confidence.len()]
    } else {
        confidence.iter().map(|c| c / denom).collect()
    };
    Ok(ConfidenceMetrics { confidence, relative })
}

/// Denominator used to scale equilibrium influence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InfluenceNormalization {
    /// `pi_j / max_i pi_i` (canonical).
    #[default]
    Max,
    /// `pi_j / pi_(n-1)`; falls back to `Max` when the runner-up weight is zero.
    SecondLargest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMetrics {
    pub influence: Vec<f64>,
    pub peer_influence: Vec<f64>,
    pub weights: AggregationWeights,
}

fn scale_by_max(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return vec![1.0; v.len()];
    }
    v.iter().map(|x| x / max).collect()
}

/// Column sums of `A + (I - A) W` with the diagonal removed.
pub fn peer_weights(params: &FJParameters) -> Vec<f64> {
    let b = params.social_matrix();
    let n = params.n();
    (0..n)
        .map(|j| (0..n).filter(|&i| i != j).map(|i| b[(i, j)]).sum())
        .collect()
}

/// Influence `I_j` from the equilibrium weights and peer influence `P_j`.
///
/// If no agent places any weight on a peer (all `alpha = 1`), `P_j = 1` for all j.
pub fn influence_metrics(
    params: &FJParameters,
    eta: &[f64],
    normalization: InfluenceNormalization,
) -> Result<InfluenceMetrics> {
    let m = influence_weights(params)?;
    let weights = aggregate_pi(&m, eta)?;
    let influence = match normalization {
        InfluenceNormalization::Max => scale_by_max(&weights.pi),
        InfluenceNormalization::SecondLargest => {
            let denom = if weights.pi.len() >= 2 {
                second_largest(&weights.pi)
            } else {
                0.0
            };
            if denom > 0.0 {
                weights.pi.iter().map(|x| x / denom).collect()
            } else {
                scale_by_max(&weights.pi)
            }
        }
    };
    let peer_influence = scale_by_max(&peer_weights(params));
    Ok(InfluenceMetrics {
        influence,
        peer_influence,
        weights,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean Euclidean distance of each belief to the mean belief.
pub fn disagreement(s: &BeliefSnapshot) -> f64 {
    let mean = s.mean();
    s.rows().iter().map(|r| sq_dist(r, &mean).sqrt()).sum::<f64>() / s.n() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMetrics {
    /// Cosine similarity of each belief to the mean belief.
    pub alignment: Vec<f64>,
    /// 1 when the agent's answer matches the answer of the mean belief.
    pub score: Vec<u8>,
    /// Number of other agents with the same answer.
    pub count: Vec<usize>,
}

pub fn alignment_metrics(s: &BeliefSnapshot) -> Result<AlignmentMetrics> {
    if s.n() < 2 {
        return Err(Error::TooFewAgents(s.n()));
    }
    let mean = s.mean();
    let mean_norm = norm(&mean);
    let group = argmax_label(&mean);
    let labels = s.argmax_labels();
    let alignment = s
        .rows()
        .iter()
        .map(|r| {
            let dot: f64 = r.iter().zip(&mean).map(|(x, y)| x * y).sum();
            (dot / (norm(r) * mean_norm)).clamp(-1.0, 1.0)
        })
        .collect();
    let score = labels.iter().map(|&l| u8::from(l == group)).collect();
    let count = labels
        .iter()
        .enumerate()
        .map(|(j, lj)| labels.iter().enumerate().filter(|&(i, li)| i != j && li == lj).count())
        .collect();
    Ok(AlignmentMetrics {
        alignment,
        score,
        count,
    })
}

fn check_label(b: &[f64], y: usize) -> Result<()> {
    if y >= b.len() {
        return Err(Error::LabelOutOfRange { label: y, d: b.len() });
    }
    Ok(())
}

/// Belief mass on the correct answer.
pub fn competence(b: &[f64], y: usize) -> Result<f64> {
    check_label(b, y)?;
    Ok(b[y])
}

/// `||b - e_y||^2`.
pub fn brier_loss(b: &[f64], y: usize) -> Result<f64> {
    check_label(b, y)?;
    Ok(b.iter()
        .enumerate()
        .map(|(c, &x)| {
            let e = if c == y { 1.0 } else { 0.0 };
            (x - e) * (x - e)
        })
        .sum())
}

/// `-ln max(b_y, floor)`.
pub fn log_loss(b: &[f64], y: usize, floor: f64) -> Result<f64> {
    check_label(b, y)?;
    if !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log-loss floor must be positive, got {floor}"
        )));
    }
    Ok(-b[y].max(floor).ln())
}

/// Weighted spread `sum_j a_j ||s_j - s_a||^2` around the mixture `s_a`.
pub fn diversity(s: &BeliefSnapshot, a: &[f64]) -> Result<f64> {
    check_simplex_weights(a, s.n())?;
    let mix = s.mixture(a);
    Ok(s.rows().iter().zip(a).map(|(r, w)| w * sq_dist(r, &mix)).sum())
}

/// Pairwise form `1/2 sum_ij a_i a_j ||s_i - s_j||^2` of [`diversity`].
pub fn diversity_pairwise(s: &BeliefSnapshot, a: &[f64]) -> Result<f64> {
    check_simplex_weights(a, s.n())?;
    let mut acc = 0.0;
    for (i, ri) in s.rows().iter().enumerate() {
        for (j, rj) in s.rows().iter().enumerate().skip(i + 1) {
            acc += a[i] * a[j] * sq_dist(ri, rj);
        }
    }
    Ok(acc)
}

/// Average (fractional) ranks, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && x[idx[end + 1]] == x[idx[k]] {
            end += 1;
        }
        let r = (k + end) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=end] {
            out[i] = r;
        }
        k = end + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::TooFewPoints(x.len()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Whether all final answers agree and the final disagreement is below `threshold`.
pub fn consensus_reached(last: &BeliefSnapshot, threshold: f64) -> bool {
    let labels = last.argmax_labels();
    labels.iter().all(|&l| l == labels[0]) && disagreement(last) < threshold
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetricRow {
    pub agent_id: usize,
    pub confidence: f64,
    pub relative_confidence: f64,
    pub influence: f64,
    pub peer_influence: f64,
    pub alignment: f64,
    pub alignment_score: u8,
    pub alignment_count: usize,
    pub competence: Option<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMetricRow {
    pub sample_id: String,
    /// Disagreement of the innate beliefs.
    pub disagreement: f64,
    pub final_disagreement: f64,
    pub mean_confidence: f64,
    pub consensus_reached: bool,
    pub pi: AggregationWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricOptions {
    /// Readout weights; uniform when `None`.
    pub eta: Option<Vec<f64>>,
    pub normalization: InfluenceNormalization,
    pub consensus_threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            eta: None,
            normalization: InfluenceNormalization::Max,
            consensus_threshold: DEFAULT_CONSENSUS_THRESHOLD,
        }
    }
}

/// Per-agent and per-system metrics of one trajectory under fitted parameters.
pub fn sample_metrics(
    traj: &DeliberationTrajectory,
    params: &FJParameters,
    opts: &MetricOptions,
) -> Result<(Vec<AgentMetricRow>, SystemMetricRow)> {
    if params.n() != traj.n() {
        return Err(Error::ShapeMismatch(format!(
            "parameters have {} agents, trajectory {}",
            params.n(),
            traj.n()
        )));
    }
    let s = traj.innate();
    let eta = opts.eta.clone().unwrap_or_else(|| uniform_eta(s.n()));
    let conf = confidence_metrics(s)?;
    let infl = influence_metrics(params, &eta, opts.normalization)?;
    let align = alignment_metrics(s)?;
    let rows = (0..s.n())
        .map(|j| {
            Ok(AgentMetricRow {
                agent_id: j,
                confidence: conf.confidence[j],
                relative_confidence: conf.relative[j],
                influence: infl.influence[j],
                peer_influence: infl.peer_influence[j],
                alignment: align.alignment[j],
                alignment_score: align.score[j],
                alignment_count: align.count[j],
                competence: traj.correct_label.map(|y| competence(s.row(j), y)).transpose()?,
                gamma: params.gamma()[j],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let system = SystemMetricRow {
        sample_id: traj.sample_id.clone(),
        disagreement: disagreement(s),
        final_disagreement: disagreement(traj.last()),
        mean_confidence: conf.confidence.iter().sum::<f64>() / s.n() as f64,
        consensus_reached: consensus_reached(traj.last(), opts.consensus_threshold),
        pi: infl.weights,
    };
    Ok((rows, system))
}

#[cfg(test)]
mod tests {
    #![allow(clippy::approx_constant)]

    use super::*;
    use crate::domain::{complete_mask, BeliefVector};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn snap(rows: &[&[f64]]) -> BeliefSnapshot {
        BeliefSnapshot::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn confidence_examples() {
        assert!(confidence(&[0.25; 4]).abs() < 1e-15);
        assert_eq!(confidence(&[0.0, 1.0, 0.0]), 1.0);
        // H = -(0.9 ln 0.9 + 0.1 ln 0.1) = 0.325083 nats
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - 0.325083).abs() < 1e-6);
        assert!((confidence(&[0.9, 0.1]) - 0.5310).abs() < 1e-4);
    }

    #[test]
    fn confidence_metrics_examples() {
        let m = confidence_metrics(&snap(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]])).unwrap();
        assert_eq!(m.confidence, vec![0.0; 3]);
        assert_eq!(m.relative, vec![1.0; 3]);
        let m = confidence_metrics(&snap(&[&[0.8, 0.2], &[0.8, 0.2]])).unwrap();
        assert_eq!(m.relative, vec![1.0; 2]);
        assert_eq!(confidence_metrics(&snap(&[&[0.8, 0.2]])), Err(Error::TooFewAgents(1)));
    }

    #[test]
    fn relative_confidence_uses_second_largest() {
        // beliefs whose confidences are 0.8, 0.4, 0.2 would give R = (2, 1, 0.5);
        // check the scaling rule directly on a snapshot with known ordering
        let s = snap(&[&[0.99, 0.01], &[0.8, 0.2], &[0.6, 0.4]]);
        let m = confidence_metrics(&s).unwrap();
        let c1 = m.confidence[1];
        for j in 0..3 {
            assert!((m.relative[j] - m.confidence[j] / c1).abs() < 1e-15);
        }
        assert!((m.relative[1] - 1.0).abs() < 1e-15);
        let c = [0.8, 0.4, 0.2];
        let d = second_largest(&c);
        let r: Vec<f64> = c.iter().map(|x| x / d).collect();
        assert_eq!(r, vec![2.0, 1.0, 0.5]);
    }

    #[test]
    fn influence_examples() {
        let p = FJParameters::uniform(4, 0.3, 0.2, complete_mask(4)).unwrap();
        let m = influence_metrics(&p, &uniform_eta(4), InfluenceNormalization::Max).unwrap();
        assert!(m.influence.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(m.peer_influence.iter().all(|x| (x - 1.0).abs() < 1e-12));

        let p = FJParameters::uniform(5, 0.5, 0.0, complete_mask(5)).unwrap();
        let m = influence_metrics(&p, &uniform_eta(5), InfluenceNormalization::Max).unwrap();
        assert!(m.peer_influence.iter().all(|x| (x - 1.0).abs() < 1e-12));

        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p = FJParameters::complete(vec![0.5, 0.5], vec![0.0, 0.5], w).unwrap();
        assert_eq!(peer_weights(&p), vec![0.5, 1.0]);
        let m = influence_metrics(&p, &uniform_eta(2), InfluenceNormalization::Max).unwrap();
        assert_eq!(m.peer_influence, vec![0.5, 1.0]);
    }

    #[test]
    fn second_largest_normalization() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0]);
        let p = FJParameters::complete(vec![0.9, 0.3, 0.1], vec![0.0; 3], w).unwrap();
        let eta = uniform_eta(3);
        let max = influence_metrics(&p, &eta, InfluenceNormalization::Max).unwrap();
        let second = influence_metrics(&p, &eta, InfluenceNormalization::SecondLargest).unwrap();
        let pi = &max.weights.pi;
        let d = second_largest(pi);
        for (got, p) in second.influence.iter().zip(pi) {
            assert!((got - p / d).abs() < 1e-12);
        }
        assert!((max.influence[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(disagreement(&snap(&[&[0.3, 0.7], &[0.3, 0.7]])), 0.0);
        let d = disagreement(&snap(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!((d - 0.70711).abs() < 1e-5);
        let a = snap(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4]]);
        let b = snap(&[&[0.6, 0.4], &[0.9, 0.1], &[0.2, 0.8]]);
        assert!((disagreement(&a) - disagreement(&b)).abs() < 1e-15);
    }

    #[test]
    fn alignment_examples() {
        let m = alignment_metrics(&snap(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]])).unwrap();
        assert!(m.alignment.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert_eq!(m.score, vec![1, 1, 1]);
        assert_eq!(m.count, vec![2, 2, 2]);

        let m = alignment_metrics(&snap(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(m.count, vec![0, 0]);
        assert!(m.alignment.iter().all(|x| (x - 0.70711).abs() < 1e-5));
        assert_eq!(m.score, vec![1, 0]);
    }

    #[test]
    fn loss_examples() {
        let oh = BeliefVector::one_hot(3, 1).unwrap();
        assert_eq!(competence(&oh, 1).unwrap(), 1.0);
        assert_eq!(competence(&[0.25; 4], 2).unwrap(), 0.25);
        assert_eq!(competence(&[0.9, 0.1], 1).unwrap(), 0.1);
        assert_eq!(
            competence(&[0.9, 0.1], 2),
            Err(Error::LabelOutOfRange { label: 2, d: 2 })
        );

        assert_eq!(brier_loss(&oh, 1).unwrap(), 0.0);
        assert!((brier_loss(&[0.5, 0.5], 0).unwrap() - 0.5).abs() < 1e-15);
        assert!((brier_loss(&[0.9, 0.1], 0).unwrap() - 0.02).abs() < 1e-15);
        assert!(brier_loss(&[0.9, 0.1], 5).is_err());

        assert_eq!(log_loss(&oh, 1, LOG_LOSS_FLOOR).unwrap(), 0.0);
        assert!((log_loss(&[0.9, 0.1], 0, LOG_LOSS_FLOOR).unwrap() - 0.10536).abs() < 1e-5);
        assert!((log_loss(&[1.0, 0.0], 1, LOG_LOSS_FLOOR).unwrap() - 27.631).abs() < 1e-3);
        assert!(log_loss(&[1.0, 0.0], 3, LOG_LOSS_FLOOR).is_err());
    }

    #[test]
    fn diversity_examples() {
        let s = snap(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((diversity(&s, &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((diversity_pairwise(&s, &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(diversity(&s, &[1.0, 0.0]).unwrap(), 0.0);
        let same = snap(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(diversity(&same, &[0.4, 0.6]).unwrap(), 0.0);
        assert!(matches!(diversity(&s, &[0.7, 0.7]), Err(Error::WeightNotSimplex(_))));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::TooFewPoints(2)));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::ZeroVariance));
        // ties get average ranks
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn consensus_rule() {
        assert!(consensus_reached(&snap(&[&[0.8, 0.2], &[0.79, 0.21]]), 0.05));
        assert!(!consensus_reached(&snap(&[&[0.8, 0.2], &[0.4, 0.6]]), 0.05));
    }

    fn simplex_row(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, d).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn confidence_permutation_invariant(row in simplex_row(5), k in 0usize..5) {
            let mut rot = row.clone();
            rot.rotate_left(k);
            prop_assert!((confidence(&row) - confidence(&rot)).abs() < 1e-12);
            let c = confidence(&row);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn brier_mixture_identity(
            rows in proptest::collection::vec(simplex_row(4), 2..6),
            raw_a in proptest::collection::vec(0.01f64..1.0, 6),
            y in 0usize..4,
        ) {
            let n = rows.len();
            let s = BeliefSnapshot::from_rows(rows).unwrap();
            let total: f64 = raw_a[..n].iter().sum();
            let a: Vec<f64> = raw_a[..n].iter().map(|x| x / total).collect();
            let mix = s.mixture(&a);
            let lhs = brier_loss(&mix, y).unwrap();
            let avg: f64 = s.rows().iter().zip(&a).map(|(r, w)| w * brier_loss(r, y).unwrap()).sum();
            let rhs = avg - diversity(&s, &a).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!((diversity(&s, &a).unwrap() - diversity_pairwise(&s, &a).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn alignment_score_implies_count(rows in proptest::collection::vec(simplex_row(3), 2..7)) {
            let s = BeliefSnapshot::from_rows(rows).unwrap();
            let m = alignment_metrics(&s).unwrap();
            let n = s.n();
            let labels = s.argmax_labels();
            for i in 0..n {
                for j in 0..n {
                    if i != j && m.score[i] == 1 && m.score[j] == 1 {
                        prop_assert_eq!(labels[i], labels[j]);
                    }
                }
                prop_assert!(m.count[i] < n);
            }
        }
    }
}
