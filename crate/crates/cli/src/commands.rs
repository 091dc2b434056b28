use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fjlab_core::domain::{
    argmax_label, complete_mask, uniform_weights, BeliefSnapshot, DeliberationTrajectory, FJParameters,
};
use fjlab_core::dynamics::{
    build_h, equilibrium_or_iterate, simulate as run_fj, spectral_radius, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL,
};
use fjlab_core::estimation::{fit_global, fit_sample, parameter_variability, FitReport};
use fjlab_core::metrics::{confidence, sample_metrics, spearman};
use fjlab_core::random::{random_params, random_snapshot, ParamRanges};
use fjlab_core::routing::LabeledSnapshotSet;
use fjlab_core::scenarios::{gen_exclusive, gen_imperfect, ExclusiveScenario, ImperfectScenario};
use fjlab_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{RunConfig, SimulateConfig, SimulateMode};
use crate::error::{CliError, CliResult};
use crate::format::{load_trajectories, read_text, save_trajectories, square, to_json, write_atomic, ParamsRecord};

pub const TRAJECTORIES_FILE: &str = "trajectories.json";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const AGENT_METRICS_FILE: &str = "agent_metrics.csv";
pub const SYSTEM_METRICS_FILE: &str = "system_metrics.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const COMPARE_REPORT_FILE: &str = "compare_report.json";

pub const AGENT_COLUMNS: [&str; 11] = [
    "sample_id",
    "agent_id",
    "confidence",
    "relative_confidence",
    "influence",
    "peer_influence",
    "alignment",
    "alignment_score",
    "alignment_count",
    "competence",
    "gamma",
];
pub const SYSTEM_COLUMNS: [&str; 8] = [
    "sample_id",
    "n",
    "d",
    "disagreement",
    "final_disagreement",
    "mean_confidence",
    "consensus_reached",
    "pi",
];
pub const CORRELATION_COLUMNS: [&str; 3] = ["pair", "spearman", "points"];

const POOL_KEY: &str = "pool";

/// Settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    /// Absent with fewer than two values.
    pub ci95_half_width: Option<f64>,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let k = values.len();
    if k == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            ci95_half_width: None,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return Summary {
            mean,
            std: 0.0,
            ci95_half_width: None,
            count: k,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Summary {
        mean,
        std,
        ci95_half_width: Some(t * std / (k as f64).sqrt()),
        count: k,
    }
}

fn sample_id(pool: usize, pools: usize, k: usize) -> String {
    if pools > 1 {
        format!("p{pool:02}-s{k:05}")
    } else {
        format!("s{k:05}")
    }
}

fn annotate(traj: &mut DeliberationTrajectory, params: &FJParameters, pool: usize) -> CliResult<()> {
    let rho = spectral_radius(&build_h(params), DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER)?;
    let labels = traj.last().argmax_labels();
    let consensus = labels.iter().all(|&l| l == labels[0]);
    traj.metadata.insert("spectral_radius".into(), rho.to_string());
    traj.metadata.insert("consensus".into(), consensus.to_string());
    traj.metadata.insert(POOL_KEY.into(), pool.to_string());
    Ok(())
}

fn explicit_trajectory(sc: &SimulateConfig) -> CliResult<(DeliberationTrajectory, FJParameters)> {
    let need = |what: &str| CliError::Config(format!("explicit mode needs simulate.{what}"));
    let gamma = sc.gamma.clone().ok_or_else(|| need("gamma"))?;
    let alpha = sc.alpha.clone().ok_or_else(|| need("alpha"))?;
    let innate = sc.innate.clone().ok_or_else(|| need("innate"))?;
    let n = gamma.len();
    let mask = match &sc.mask {
        Some(m) => square(m, n, "simulate.mask")?,
        None => complete_mask(n),
    };
    let w = match &sc.weights {
        Some(w) => square(w, n, "simulate.weights")?,
        None => uniform_weights(&mask),
    };
    let params = FJParameters::new(gamma, alpha, w, mask)?;
    let innate = BeliefSnapshot::from_rows(innate)?;
    let mut traj = run_fj(&params, &innate, sc.rounds)?;
    traj.sample_id = "explicit".into();
    if let Some(y) = sc.label {
        if y >= traj.d() {
            return Err(Error::LabelOutOfRange { label: y, d: traj.d() }.into());
        }
        traj.correct_label = Some(y);
    }
    Ok((traj, params))
}

/// Stubbornness rising linearly with innate confidence, min-max scaled.
pub fn confidence_gamma(innate: &BeliefSnapshot, range: [f64; 2]) -> Vec<f64> {
    let c: Vec<f64> = innate.rows().iter().map(|r| confidence(r)).collect();
    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    c.iter()
        .map(|&x| {
            let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            range[0] + t * (range[1] - range[0])
        })
        .collect()
}

fn scenario_items(sc: &SimulateConfig, seed: u64) -> CliResult<LabeledSnapshotSet> {
    Ok(match sc.mode {
        SimulateMode::Exclusive => {
            let rho = sc.rho.clone().unwrap_or_else(|| vec![1.0 / sc.n as f64; sc.n]);
            gen_exclusive(&ExclusiveScenario::new(sc.n, sc.d, rho, sc.epsilon)?, sc.samples, seed)?
        }
        _ => gen_imperfect(&ImperfectScenario::new(sc.n, sc.d, sc.p, sc.u, sc.c)?, sc.samples, seed)?,
    })
}

/// Generates trajectories per the `[simulate]` section.
pub fn simulate(ctx: &Context, output: Option<&Path>) -> CliResult<PathBuf> {
    let sc = &ctx.config.simulate;
    if sc.pools == 0 {
        return Err(CliError::Config("simulate.pools must be >= 1".into()));
    }
    let mut trajs = Vec::new();
    match sc.mode {
        SimulateMode::Explicit => {
            let (mut traj, params) = explicit_trajectory(sc)?;
            annotate(&mut traj, &params, 0)?;
            trajs.push(traj);
        }
        SimulateMode::Random => {
            if sc.d < 2 || sc.n < 1 {
                return Err(CliError::Config("simulate needs n >= 1 and d >= 2".into()));
            }
            let ranges = ParamRanges {
                gamma: (sc.gamma_range[0], sc.gamma_range[1]),
                alpha: (sc.alpha_range[0], sc.alpha_range[1]),
            };
            for pool in 0..sc.pools {
                for k in 0..sc.samples {
                    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
                    rng.set_stream((pool * sc.samples + k) as u64);
                    let params = random_params(&mut rng, sc.n, ranges)?;
                    let innate = random_snapshot(&mut rng, sc.n, sc.d)?;
                    let label = rng.random_range(0..sc.d);
                    let mut traj = run_fj(&params, &innate, sc.rounds)?;
                    traj.sample_id = sample_id(pool, sc.pools, k);
                    traj.correct_label = Some(label);
                    annotate(&mut traj, &params, pool)?;
                    trajs.push(traj);
                }
            }
        }
        SimulateMode::Exclusive | SimulateMode::Imperfect => {
            for pool in 0..sc.pools {
                let data = scenario_items(sc, ctx.seed.wrapping_add(pool as u64))?;
                for (k, item) in data.items().iter().enumerate() {
                    let mut traj = if sc.mode == SimulateMode::Exclusive {
                        // single-round export
                        let mut t = DeliberationTrajectory::new("", vec![item.snapshot.clone()], Some(item.label))?;
                        t.metadata.insert(POOL_KEY.into(), pool.to_string());
                        t
                    } else {
                        let gamma = confidence_gamma(&item.snapshot, sc.gamma_range);
                        let params = FJParameters::new(
                            gamma,
                            vec![sc.alpha_range[0]; sc.n],
                            uniform_weights(&complete_mask(sc.n)),
                            complete_mask(sc.n),
                        )?;
                        let mut t = run_fj(&params, &item.snapshot, sc.rounds)?;
                        t.correct_label = Some(item.label);
                        annotate(&mut t, &params, pool)?;
                        t
                    };
                    traj.sample_id = sample_id(pool, sc.pools, k);
                    if let Some(region) = item.region {
                        traj.metadata.insert("region".into(), region.to_string());
                    }
                    trajs.push(traj);
                }
            }
        }
    }
    if let Some(names) = &sc.label_names {
        let json = serde_json::to_string(names).expect("strings serialize");
        for t in trajs.iter_mut() {
            t.metadata.insert(crate::format::LABEL_NAMES_KEY.into(), json.clone());
        }
    }
    for t in &trajs {
        let rho = t.metadata.get("spectral_radius").map_or("-", String::as_str);
        let consensus = t.metadata.get("consensus").map_or("-", String::as_str);
        ctx.say(format!("{} spectral_radius={rho} consensus={consensus}", t.sample_id));
    }
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.output(TRAJECTORIES_FILE));
    save_trajectories(&path, &trajs)?;
    ctx.say(format!("wrote {} samples to {}", trajs.len(), path.display()));
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFit {
    pub sample_id: String,
    pub params: ParamsRecord,
    pub kl: f64,
    pub mse: f64,
    pub objective: f64,
    pub iterations: usize,
    pub restart_index: usize,
    pub flat: bool,
}

impl SampleFit {
    fn new(sample_id: String, r: &FitReport) -> Self {
        Self {
            sample_id,
            params: ParamsRecord::from_params(&r.params),
            kl: r.kl,
            mse: r.mse,
            objective: r.objective,
            iterations: r.iterations,
            restart_index: r.restart_index,
            flat: r.flat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionRecord {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitAggregate {
    pub kl: Summary,
    pub mse: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportFile {
    pub objective: String,
    pub reg_lambda: f64,
    pub seed: u64,
    pub samples: Vec<SampleFit>,
    pub aggregate: FitAggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variability: Option<Vec<DispersionRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<SampleFit>,
}

impl FitReportFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Parse {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

fn sorted(mut trajs: Vec<DeliberationTrajectory>) -> Vec<DeliberationTrajectory> {
    trajs.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    trajs
}

/// Per-sample fits (and optionally one shared fit) of every trajectory.
pub fn fit(ctx: &Context, input: &Path, global: bool) -> CliResult<FitReportFile> {
    let cfg = ctx.config.fit.to_fit_config(ctx.seed)?;
    let ingested = load_trajectories(input)?;
    for d in &ingested.drift {
        ctx.say(format!(
            "renormalized {} round {} agent {} (sum {})",
            d.sample_id, d.round, d.agent, d.sum
        ));
    }
    let trajs = sorted(ingested.trajectories);
    if trajs.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let mut reports = Vec::with_capacity(trajs.len());
    for t in &trajs {
        let r = fit_sample(t, &cfg)?;
        ctx.say(format!("{} kl={:.3e} mse={:.3e}", t.sample_id, r.kl, r.mse));
        reports.push(r);
    }
    let variability = if reports.len() >= 2 && reports.iter().all(|r| r.params.n() == reports[0].params.n()) {
        Some(
            parameter_variability(&reports)?
                .per_parameter
                .into_iter()
                .map(|d| DispersionRecord {
                    name: d.name,
                    mean: d.mean,
                    std: d.std,
                    iqr: d.iqr,
                })
                .collect(),
        )
    } else {
        None
    };
    let global = if global {
        let r = fit_global(&trajs, &cfg)?;
        ctx.say(format!("global kl={:.3e} mse={:.3e}", r.kl, r.mse));
        Some(SampleFit::new("global".into(), &r))
    } else {
        None
    };
    let kl: Vec<f64> = reports.iter().map(|r| r.kl).collect();
    let mse: Vec<f64> = reports.iter().map(|r| r.mse).collect();
    let file = FitReportFile {
        objective: cfg.objective.name().into(),
        reg_lambda: cfg.reg_lambda,
        seed: cfg.seed,
        samples: trajs
            .iter()
            .zip(&reports)
            .map(|(t, r)| SampleFit::new(t.sample_id.clone(), r))
            .collect(),
        aggregate: FitAggregate {
            kl: summarize(&kl),
            mse: summarize(&mse),
        },
        variability,
        global,
    };
    let path = ctx.output(FIT_REPORT_FILE);
    write_atomic(&path, to_json(&file).as_bytes())?;
    ctx.say(format!("wrote {}", path.display()));
    Ok(file)
}

fn num(x: f64) -> String {
    x.to_string()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Csv(csv::Error::from(e.into_error())))
}

/// Paths of the three CSV files written by [`analyze`].
#[derive(Debug, Clone)]
pub struct AnalyzeOutputs {
    pub agent_metrics: PathBuf,
    pub system_metrics: PathBuf,
    pub correlations: PathBuf,
}

/// Metric tables for every trajectory under its fitted parameters.
pub fn analyze(ctx: &Context, input: &Path, params: &Path) -> CliResult<AnalyzeOutputs> {
    let opts = ctx.config.analyze.to_options()?;
    let trajs = sorted(load_trajectories(input)?.trajectories);
    if trajs.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let report = FitReportFile::load(params)?;
    let by_id: BTreeMap<&str, &ParamsRecord> = report
        .samples
        .iter()
        .map(|s| (s.sample_id.as_str(), &s.params))
        .collect();

    let mut agent_rows = Vec::new();
    let mut system_rows = Vec::new();
    let (mut conf, mut infl, mut comp) = (Vec::new(), Vec::new(), Vec::new());
    for t in &trajs {
        let rec = by_id
            .get(t.sample_id.as_str())
            .ok_or_else(|| CliError::MissingParams(t.sample_id.clone()))?;
        let (agents, system) = sample_metrics(t, &rec.to_params()?, &opts)?;
        for a in &agents {
            agent_rows.push(vec![
                t.sample_id.clone(),
                a.agent_id.to_string(),
                num(a.confidence),
                num(a.relative_confidence),
                num(a.influence),
                num(a.peer_influence),
                num(a.alignment),
                a.alignment_score.to_string(),
                a.alignment_count.to_string(),
                a.competence.map(num).unwrap_or_default(),
                num(a.gamma),
            ]);
            if let Some(c) = a.competence {
                conf.push(a.confidence);
                infl.push(a.influence);
                comp.push(c);
            }
        }
        system_rows.push(vec![
            system.sample_id.clone(),
            t.n().to_string(),
            t.d().to_string(),
            num(system.disagreement),
            num(system.final_disagreement),
            num(system.mean_confidence),
            system.consensus_reached.to_string(),
            system.pi.pi.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";"),
        ]);
    }
    let mut corr_rows = Vec::new();
    if !comp.is_empty() {
        for (name, xs) in [("confidence_competence", &conf), ("influence_competence", &infl)] {
            let rho = match spearman(xs, &comp) {
                Ok(r) => num(r),
                Err(Error::ZeroVariance | Error::TooFewPoints(_)) => String::new(),
                Err(e) => return Err(e.into()),
            };
            corr_rows.push(vec![name.to_string(), rho, comp.len().to_string()]);
        }
    }
    let out = AnalyzeOutputs {
        agent_metrics: ctx.output(AGENT_METRICS_FILE),
        system_metrics: ctx.output(SYSTEM_METRICS_FILE),
        correlations: ctx.output(CORRELATIONS_FILE),
    };
    write_atomic(&out.agent_metrics, &csv_bytes(&AGENT_COLUMNS, &agent_rows)?)?;
    write_atomic(&out.system_metrics, &csv_bytes(&SYSTEM_COLUMNS, &system_rows)?)?;
    write_atomic(&out.correlations, &csv_bytes(&CORRELATION_COLUMNS, &corr_rows)?)?;
    ctx.say(format!(
        "wrote {} agent rows and {} system rows to {}",
        agent_rows.len(),
        system_rows.len(),
        ctx.output_dir.display()
    ));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAccuracy {
    pub pool: String,
    pub samples: usize,
    pub baseline: f64,
    pub fj_ensemble: f64,
    pub mas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub pools: Vec<PoolAccuracy>,
    pub baseline: Summary,
    pub fj_ensemble: Summary,
    pub mas: Summary,
}

fn accuracy(hits: impl Iterator<Item = bool>) -> f64 {
    let (mut k, mut n) = (0usize, 0usize);
    for h in hits {
        k += h as usize;
        n += 1;
    }
    k as f64 / n as f64
}

/// Accuracy of the innate average, the FJ equilibrium under one fitted
/// parameter set per pool, and the observed final round.
pub fn compare(ctx: &Context, inputs: &[PathBuf]) -> CliResult<CompareReport> {
    let cfg = ctx.config.compare.to_fit_config(ctx.seed)?;
    let mut pools: BTreeMap<String, Vec<DeliberationTrajectory>> = BTreeMap::new();
    for (idx, path) in inputs.iter().enumerate() {
        for t in load_trajectories(path)?.trajectories {
            if t.correct_label.is_none() {
                return Err(CliError::MissingLabels(t.sample_id));
            }
            if t.rounds() < 1 {
                return Err(CliError::BadSample {
                    sample_id: t.sample_id,
                    reason: "compare needs at least two rounds".into(),
                });
            }
            let key = format!(
                "input{idx}/pool{}",
                t.metadata.get(POOL_KEY).map_or("0", String::as_str)
            );
            pools.entry(key).or_default().push(t);
        }
    }
    if pools.is_empty() {
        return Err(Error::EmptyInput.into());
    }
    let mut rows = Vec::with_capacity(pools.len());
    for (pool, trajs) in pools {
        let trajs = sorted(trajs);
        let fitted = fit_global(&trajs, &cfg)?.params;
        let eta = vec![1.0 / fitted.n() as f64; fitted.n()];
        let mut ens_hits = Vec::with_capacity(trajs.len());
        for t in &trajs {
            let (eq, _) = equilibrium_or_iterate(&fitted, t.innate())?;
            ens_hits.push(argmax_label(&eq.mixture(&eta)) == t.correct_label.unwrap());
        }
        let row = PoolAccuracy {
            samples: trajs.len(),
            baseline: accuracy(
                trajs
                    .iter()
                    .map(|t| argmax_label(&t.innate().mean()) == t.correct_label.unwrap()),
            ),
            fj_ensemble: accuracy(ens_hits.into_iter()),
            mas: accuracy(
                trajs
                    .iter()
                    .map(|t| argmax_label(&t.last().mean()) == t.correct_label.unwrap()),
            ),
            pool,
        };
        ctx.say(format!(
            "{}: baseline {:.3} fj-ens {:.3} mas {:.3} ({} samples)",
            row.pool, row.baseline, row.fj_ensemble, row.mas, row.samples
        ));
        rows.push(row);
    }
    let col = |f: fn(&PoolAccuracy) -> f64| summarize(&rows.iter().map(f).collect::<Vec<_>>());
    let report = CompareReport {
        baseline: col(|r| r.baseline),
        fj_ensemble: col(|r| r.fj_ensemble),
        mas: col(|r| r.mas),
        pools: rows,
    };
    let path = ctx.output(COMPARE_REPORT_FILE);
    write_atomic(&path, to_json(&report).as_bytes())?;
    ctx.say(format!("wrote {}", path.display()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_t_interval() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        // t_{0.975, 2} = 4.302653
        assert!((s.ci95_half_width.unwrap() - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
        assert_eq!(summarize(&[5.0]).ci95_half_width, None);
    }

    #[test]
    fn confidence_gamma_spans_range() {
        let s = BeliefSnapshot::from_rows(vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let g = confidence_gamma(&s, [0.1, 0.9]);
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] - 0.9).abs() < 1e-15);
        assert!(g[2] > 0.1 && g[2] < 0.9);
    }
}
