//! Trajectory files (JSON, `schema_version` "1") and fitted-parameter records.
//!
//! Matrices are row-major: `rounds[t][i][c]` is agent `i`'s mass on label `c`
//! at round `t`. Rows may drift from the simplex by up to 1e-6 and are
//! renormalized on load.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use fjlab_core::domain::{complete_mask, BeliefSnapshot, BeliefVector, DeliberationTrajectory, FJParameters};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: &str = "1";
pub const INGEST_TOL: f64 = 1e-6;
/// Metadata key carrying label names through [`DeliberationTrajectory`].
pub const LABEL_NAMES_KEY: &str = "label_names";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub schema_version: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub n: usize,
    pub d: usize,
    pub rounds: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A row that needed renormalization on load.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDrift {
    pub sample_id: String,
    pub round: usize,
    pub agent: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub trajectories: Vec<DeliberationTrajectory>,
    pub drift: Vec<RowDrift>,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn record_to_trajectory(rec: SampleRecord, drift: &mut Vec<RowDrift>) -> CliResult<DeliberationTrajectory> {
    let bad = |reason: String| CliError::BadSample {
        sample_id: rec.sample_id.clone(),
        reason,
    };
    if rec.rounds.is_empty() {
        return Err(bad("rounds is empty".into()));
    }
    let mut snapshots = Vec::with_capacity(rec.rounds.len());
    for (t, matrix) in rec.rounds.iter().enumerate() {
        if matrix.len() != rec.n {
            return Err(bad(format!("round {t} has {} rows, n = {}", matrix.len(), rec.n)));
        }
        let mut rows = Vec::with_capacity(rec.n);
        for (i, row) in matrix.iter().enumerate() {
            let violation = |reason: String| CliError::InvariantViolation {
                sample_id: rec.sample_id.clone(),
                round: t,
                agent: i,
                reason,
            };
            if row.len() != rec.d {
                return Err(violation(format!("row has {} entries, d = {}", row.len(), rec.d)));
            }
            let sum: f64 = row.iter().sum();
            let v = BeliefVector::with_tolerance(row.clone(), INGEST_TOL).map_err(|e| violation(e.to_string()))?;
            if v.as_slice() != row.as_slice() {
                drift.push(RowDrift {
                    sample_id: rec.sample_id.clone(),
                    round: t,
                    agent: i,
                    sum,
                });
            }
            rows.push(v);
        }
        snapshots.push(BeliefSnapshot::new(rows).map_err(|e| bad(e.to_string()))?);
    }
    let mut traj = DeliberationTrajectory::new(rec.sample_id.clone(), snapshots, rec.correct_label)
        .map_err(|e| bad(e.to_string()))?;
    traj.metadata = rec.metadata;
    if let Some(names) = rec.label_names {
        if names.len() != rec.d {
            return Err(bad(format!("{} label names for d = {}", names.len(), rec.d)));
        }
        traj.metadata.insert(
            LABEL_NAMES_KEY.into(),
            serde_json::to_string(&names).expect("strings serialize"),
        );
    }
    Ok(traj)
}

pub fn parse_trajectories(text: &str, path: &Path) -> CliResult<Ingested> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    match value.get("schema_version").and_then(|v| v.as_str()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => return Err(CliError::SchemaVersionUnsupported(other.into())),
        None => {
            return Err(CliError::Parse {
                path: path.into(),
                message: "missing string field schema_version".into(),
            })
        }
    }
    let file: TrajectoryFile = serde_json::from_value(value).map_err(|e| CliError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    let mut drift = Vec::new();
    let mut trajectories = Vec::with_capacity(file.samples.len());
    for rec in file.samples {
        if !seen.insert(rec.sample_id.clone()) {
            return Err(CliError::BadSample {
                sample_id: rec.sample_id,
                reason: "duplicate sample_id".into(),
            });
        }
        trajectories.push(record_to_trajectory(rec, &mut drift)?);
    }
    Ok(Ingested { trajectories, drift })
}

pub fn load_trajectories(path: &Path) -> CliResult<Ingested> {
    parse_trajectories(&read_text(path)?, path)
}

pub fn to_record(traj: &DeliberationTrajectory) -> SampleRecord {
    let mut metadata = traj.metadata.clone();
    let label_names = metadata
        .remove(LABEL_NAMES_KEY)
        .and_then(|s| serde_json::from_str(&s).ok());
    SampleRecord {
        sample_id: traj.sample_id.clone(),
        n: traj.n(),
        d: traj.d(),
        rounds: traj
            .snapshots
            .iter()
            .map(|s| s.rows().iter().map(|r| r.to_vec()).collect())
            .collect(),
        correct_label: traj.correct_label,
        label_names,
        metadata,
    }
}

/// Samples are written in `sample_id` order.
pub fn to_file(trajs: &[DeliberationTrajectory]) -> TrajectoryFile {
    let mut samples: Vec<SampleRecord> = trajs.iter().map(to_record).collect();
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    TrajectoryFile {
        schema_version: SCHEMA_VERSION.into(),
        samples,
    }
}

pub fn save_trajectories(path: &Path, trajs: &[DeliberationTrajectory]) -> CliResult<()> {
    write_atomic(path, to_json(&to_file(trajs)).as_bytes())
}

/// FJ parameters as stored in fit reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRecord {
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    /// Allowed edges; complete graph when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<Vec<bool>>>,
}

pub(crate) fn square<T>(rows: &[Vec<T>], n: usize, what: &str) -> CliResult<DMatrix<T>>
where
    T: nalgebra::Scalar + Copy,
{
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{what} must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ParamsRecord {
    pub fn from_params(p: &FJParameters) -> Self {
        let n = p.n();
        let w = (0..n).map(|i| (0..n).map(|j| p.w()[(i, j)]).collect()).collect();
        let mask = (p.mask() != &complete_mask(n))
            .then(|| (0..n).map(|i| (0..n).map(|j| p.mask()[(i, j)]).collect()).collect());
        Self {
            gamma: p.gamma().to_vec(),
            alpha: p.alpha().to_vec(),
            w,
            mask,
        }
    }

    pub fn to_params(&self) -> CliResult<FJParameters> {
        let n = self.gamma.len();
        let w = square(&self.w, n, "w")?;
        let mask = match &self.mask {
            Some(m) => square(m, n, "mask")?,
            None => complete_mask(n),
        };
        Ok(FJParameters::new(self.gamma.clone(), self.alpha.clone(), w, mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json(rows: &str) -> String {
        format!(
            r#"{{"schema_version":"1","samples":[{{"sample_id":"s0","n":2,"d":2,
            "rounds":[{rows}],"correct_label":1,"label_names":["yes","no"],"metadata":{{"k":"v"}}}}]}}"#
        )
    }

    #[test]
    fn round_trip() {
        let text = sample_json("[[0.25,0.75],[0.6,0.4]],[[0.3,0.7],[0.5,0.5]]");
        let ing = parse_trajectories(&text, Path::new("t.json")).unwrap();
        assert!(ing.drift.is_empty());
        let back = to_json(&to_file(&ing.trajectories));
        let again = parse_trajectories(&back, Path::new("t.json")).unwrap();
        assert_eq!(ing, again);
        let rec = &to_file(&again.trajectories).samples[0];
        assert_eq!(
            rec.label_names.as_deref(),
            Some(&["yes".to_string(), "no".to_string()][..])
        );
        assert_eq!(rec.metadata.get("k").map(String::as_str), Some("v"));
    }

    #[test]
    fn drift_is_renormalized_and_logged() {
        let text = sample_json("[[0.5000004,0.5],[0.6,0.4]]");
        let ing = parse_trajectories(&text, Path::new("t.json")).unwrap();
        assert_eq!(ing.drift.len(), 1);
        assert_eq!((ing.drift[0].round, ing.drift[0].agent), (0, 0));
        let row = ing.trajectories[0].innate().row(0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_entry_names_cell() {
        let text = sample_json("[[0.5,0.5],[0.5,0.5]],[[1.01,-0.01],[0.5,0.5]]");
        let err = parse_trajectories(&text, Path::new("t.json")).unwrap_err();
        match err {
            CliError::InvariantViolation {
                sample_id,
                round,
                agent,
                ..
            } => {
                assert_eq!((sample_id.as_str(), round, agent), ("s0", 1, 0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_version_checked() {
        let err = parse_trajectories(r#"{"schema_version":"2","samples":[]}"#, Path::new("x")).unwrap_err();
        assert!(matches!(err, CliError::SchemaVersionUnsupported(_)));
        let err = parse_trajectories("{", Path::new("x")).unwrap_err();
        assert!(matches!(err, CliError::Parse { .. }));
    }

    #[test]
    fn params_record_round_trip() {
        let p = FJParameters::uniform(3, 0.4, 0.1, complete_mask(3)).unwrap();
        let rec = ParamsRecord::from_params(&p);
        assert!(rec.mask.is_none());
        assert_eq!(rec.to_params().unwrap(), p);
    }
}
