//! Numerical checks of the theory against closed forms and Monte Carlo.

use std::fmt::Write as _;

use fjlab_core::domain::argmax_label;
use fjlab_core::dynamics::{equilibrium, influence_weights, simulate};
use fjlab_core::metrics::{confidence, diversity, diversity_pairwise};
use fjlab_core::random::{random_params, random_simplex, random_snapshot, ParamRanges};
use fjlab_core::routing::{
    ambiguity_check, ensemble_comparison, single_agent_comparison, LabeledItem, LabeledSnapshotSet, Router,
};
use fjlab_core::scenarios::{
    exclusive_losses, gen_exclusive, gen_imperfect, imperfect_gap, mc_exclusive_losses, mc_routing_crossover,
    moe_advantage_check, optimal_fixed_ensemble, routing_error_threshold, ExclusiveScenario, ImperfectScenario,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commands::Context;
use crate::config::VerifySection;
use crate::error::{CliError, CliResult};
use crate::format::{to_json, write_atomic};

pub const REPORT_TEXT_FILE: &str = "verify_report.txt";
pub const REPORT_JSON_FILE: &str = "verify_report.json";

const ITERATE_ROUNDS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub expected: Option<f64>,
    pub tolerance: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// `|measured - expected| <= tol`.
    fn near(name: &str, measured: f64, expected: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected: Some(expected),
            tolerance: Some(tol),
            passed: (measured - expected).abs() <= tol,
            detail: String::new(),
        }
    }

    /// `measured < bound`.
    fn below(name: &str, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            expected: None,
            tolerance: Some(bound),
            passed: measured < bound,
            detail: String::new(),
        }
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Per-sample single-agent confusion: `[condition][mixture won]`.
    pub confusion: [[usize; 2]; 2],
    pub passed: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = write!(
                s,
                "{} {} measured={}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                show(c.measured)
            );
            if let Some(e) = c.expected {
                let _ = write!(s, " expected={}", show(e));
            }
            if let Some(t) = c.tolerance {
                let _ = write!(s, " tol={}", show(t));
            }
            if !c.detail.is_empty() {
                let _ = write!(s, " ({})", c.detail);
            }
            s.push('\n');
        }
        let [[a, b], [c, d]] = self.confusion;
        let _ = writeln!(s, "confusion (condition x mixture wins): [[{a}, {b}], [{c}, {d}]]");
        let _ = writeln!(s, "{}", if self.passed { "ALL PASS" } else { "FAILED" });
        s
    }
}

fn show(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-3 {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn stream(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn equilibrium_checks(cfg: &VerifySection, seed: u64) -> CliResult<Vec<Check>> {
    let mut min_entry = f64::INFINITY;
    let mut row_dev: f64 = 0.0;
    let mut iter_gap: f64 = 0.0;
    for k in 0..cfg.param_draws {
        let mut rng = stream(seed, k);
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=8);
        let params = random_params(&mut rng, n, ParamRanges::default())?;
        let innate = random_snapshot(&mut rng, n, d)?;
        let m = influence_weights(&params)?;
        min_entry = min_entry.min(m.matrix().min());
        for i in 0..n {
            row_dev = row_dev.max((m.matrix().row(i).sum() - 1.0).abs());
        }
        let eq = equilibrium(&params, &innate)?;
        let traj = simulate(&params, &innate, ITERATE_ROUNDS)?;
        iter_gap = iter_gap.max(traj.last().max_abs_diff(&eq));
    }
    let draws = format!("{} draws", cfg.param_draws);
    Ok(vec![
        Check {
            name: "influence_nonnegative".into(),
            measured: min_entry,
            expected: None,
            tolerance: Some(-1e-12),
            passed: min_entry >= -1e-12,
            detail: draws.clone(),
        },
        Check::below("influence_row_sums", row_dev, 1e-8).detail(draws.clone()),
        Check::below("iterate_vs_equilibrium", iter_gap, 1e-6).detail(draws),
    ])
}

fn identity_checks(cfg: &VerifySection, seed: u64) -> CliResult<Vec<Check>> {
    let mut gap: f64 = 0.0;
    let mut forms: f64 = 0.0;
    for k in 0..cfg.identity_draws {
        let mut rng = stream(seed.wrapping_add(1), k);
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=8);
        let s = random_snapshot(&mut rng, n, d)?;
        let a = random_simplex(&mut rng, n);
        let y = rng.random_range(0..d);
        gap = gap.max(ambiguity_check(&s, &a, y)?.gap.abs());
        forms = forms.max((diversity(&s, &a)? - diversity_pairwise(&s, &a)?).abs());
    }
    let draws = format!("{} draws", cfg.identity_draws);
    Ok(vec![
        Check::below("ambiguity_identity", gap, 1e-10).detail(draws.clone()),
        Check::below("diversity_forms", forms, 1e-10).detail(draws),
    ])
}

fn exclusive_checks(cfg: &VerifySection, sc: &ExclusiveScenario, seed: u64) -> CliResult<Vec<Check>> {
    let n = sc.n;
    let uniform = vec![1.0 / n as f64; n];
    let closed = exclusive_losses(sc, &uniform)?;
    let gap = closed.gap_balanced.expect("balanced scenario");
    let data = gen_exclusive(sc, cfg.mc_samples, seed)?;
    let mc = mc_exclusive_losses(&data, &uniform)?;
    let opt = optimal_fixed_ensemble(sc)?;
    let opt_dev = opt.iter().map(|a| (a - 1.0 / n as f64).abs()).fold(0.0, f64::max);

    let mut grid_failures = Vec::new();
    let mut grid_points = 0;
    for gn in 2..=8 {
        for gd in [2usize, 4, 10] {
            for eps in [0.05, 0.1, 0.3] {
                grid_points += 1;
                let g = ExclusiveScenario::balanced(gn, gd, eps)?;
                if !moe_advantage_check(&g)? {
                    grid_failures.push(format!("n={gn} d={gd} eps={eps}"));
                }
            }
        }
    }

    let threshold = routing_error_threshold(sc)?;
    let crossover = mc_routing_crossover(sc, cfg.mc_samples, seed, 1e-6)?;
    Ok(vec![
        Check::near("exclusive_gap_closed_form", closed.l_ens - closed.l_moe, gap, 1e-12),
        Check::near("exclusive_gap_monte_carlo", mc.l_ens - mc.l_moe, gap, cfg.mc_tolerance)
            .detail(format!("{} samples", cfg.mc_samples)),
        Check::below("optimal_ensemble_uniform", opt_dev, 1e-6),
        Check {
            name: "moe_advantage_grid".into(),
            measured: grid_failures.len() as f64,
            expected: Some(0.0),
            tolerance: None,
            passed: grid_failures.is_empty(),
            detail: if grid_failures.is_empty() {
                format!("{grid_points} grid points")
            } else {
                grid_failures.join("; ")
            },
        },
        Check::near("routing_threshold_monte_carlo", crossover, threshold, cfg.mc_tolerance),
    ])
}

fn most_confident(s: &fjlab_core::domain::BeliefSnapshot) -> usize {
    let c: Vec<f64> = s.rows().iter().map(|r| confidence(r)).collect();
    argmax_label(&c)
}

fn imperfect_checks(cfg: &VerifySection, sc: &ImperfectScenario, seed: u64) -> CliResult<Vec<Check>> {
    let gap = imperfect_gap(sc)?;
    let data = gen_imperfect(sc, cfg.mc_samples, seed)?;
    let mc = mc_exclusive_losses(&data, &vec![1.0 / sc.n as f64; sc.n])?;
    let total = data.len() as f64;
    let routed = data
        .items()
        .iter()
        .filter(|it| argmax_label(it.snapshot.row(most_confident(&it.snapshot))) == it.label)
        .count() as f64
        / total;
    let mut checks = vec![
        Check::near("imperfect_gap_monte_carlo", mc.l_ens - mc.l_moe, gap, cfg.mc_tolerance),
        Check::near("imperfect_routing_correct", routed, 1.0, 0.0),
    ];
    if sc.wrong_majority() {
        let misled = data
            .items()
            .iter()
            .filter(|it| argmax_label(&it.snapshot.mean()) == sc.wrong_label(it.label))
            .count() as f64
            / total;
        checks.push(Check::near("imperfect_ensemble_wrong", misled, 1.0, 0.0));
    }
    Ok(checks)
}

fn routing_checks(cfg: &VerifySection, seed: u64) -> CliResult<(Vec<Check>, [[usize; 2]; 2])> {
    let (n, d) = (4, 3);
    let items = (0..cfg.comparison_samples)
        .map(|k| {
            let mut rng = stream(seed.wrapping_add(2), k);
            let s = random_snapshot(&mut rng, n, d)?;
            let law = random_simplex(&mut rng, d);
            let y = rng.random_range(0..d);
            Ok(LabeledItem::new(s, y)?.with_label_law(law)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let data = LabeledSnapshotSet::new(items)?;
    let router = Router::ConfidenceSoftmax { beta: cfg.beta };
    let uniform = vec![1.0 / n as f64; n];
    let t2 = ensemble_comparison(&data, &uniform, &router)?;
    let rep = single_agent_comparison(&data, &router)?;
    let off = rep.confusion[0][1] + rep.confusion[1][0];
    let cells: usize = rep.confusion.iter().flatten().sum();
    let checks = vec![
        Check::below(
            "ensemble_gap_consistency",
            ((t2.lhs - t2.rhs) - t2.realized_gap).abs(),
            1e-10,
        )
        .detail(format!("{} samples", data.len())),
        Check {
            name: "single_agent_confusion_off_diagonal".into(),
            measured: off as f64,
            expected: Some(0.0),
            tolerance: None,
            passed: off == 0 && cells == data.len(),
            detail: format!("{cells} samples"),
        },
    ];
    Ok((checks, rep.confusion))
}

/// Runs every check. Scenario parameters are validated before any check runs.
pub fn run_checks(cfg: &VerifySection, seed: u64) -> CliResult<VerifyReport> {
    let exclusive = ExclusiveScenario::balanced(cfg.exclusive_n, cfg.exclusive_d, cfg.epsilon)?;
    let imperfect = ImperfectScenario::new(cfg.imperfect_n, cfg.imperfect_d, cfg.p, cfg.u, cfg.c)?;
    imperfect.check_confidence_order()?;
    if cfg.mc_samples == 0 || cfg.comparison_samples == 0 {
        return Err(CliError::Config("verify sample counts must be positive".into()));
    }

    let mut checks = equilibrium_checks(cfg, seed)?;
    checks.extend(identity_checks(cfg, seed)?);
    checks.extend(exclusive_checks(cfg, &exclusive, seed)?);
    checks.extend(imperfect_checks(cfg, &imperfect, seed)?);
    let (routing, confusion) = routing_checks(cfg, seed)?;
    checks.extend(routing);
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        checks,
        confusion,
        passed,
    })
}

/// Writes the text and JSON reports; any failed check is an error.
pub fn verify(ctx: &Context) -> CliResult<VerifyReport> {
    let report = run_checks(&ctx.config.verify, ctx.seed)?;
    let text = report.to_text();
    write_atomic(&ctx.output(REPORT_TEXT_FILE), text.as_bytes())?;
    write_atomic(&ctx.output(REPORT_JSON_FILE), to_json(&report).as_bytes())?;
    if !ctx.quiet {
        print!("{text}");
    }
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::VerifyFailed(report.failures()))
    }
}
