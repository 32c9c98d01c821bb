//! Experiment reports: `report.json`, companion CSVs and `timing.json`.
//!
//! Wall-clock times live in `timing.json` so that `report.json` is a pure
//! function of the config and seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dissociation::{percent2, DissociationReport};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::importance::{sig_digits, HeadSet, ImportanceMatrix};
use crate::similarity::{Correlation, SimilarityMatrix};
use crate::tasks::MetricKind;
use crate::train::{BootstrapResult, IatMasks};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub steps: usize,
    /// First IAT step; absent when the schedule has no IAT phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iat_start: Option<usize>,
    pub final_loss: Option<f64>,
    pub dev: Vec<TaskMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iat: Option<IatMasks>,
}

/// Transfer results `values[source][target]`, diagonal empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    pub k: usize,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCorrelation {
    /// What the x series is, e.g. a similarity metric name.
    pub x: String,
    pub y: String,
    #[serde(flatten)]
    pub stats: Correlation,
}

/// Per-seed comparison of two training regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system: String,
    pub baseline: String,
    pub seeds: Vec<u64>,
    /// `(system, baseline)` average metric per seed.
    pub pairs: Vec<(f64, f64)>,
    pub mean_difference: f64,
    pub bootstrap: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    /// Files the report's numbers were derived from (checkpoints, CSVs).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training: Vec<TrainingSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<ImportanceMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_sets: Vec<HeadSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dissociation: Vec<DissociationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarity: Vec<SimilarityMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub correlation: Vec<NamedCorrelation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckResult>,
}

impl ExperimentReport {
    pub fn new(command: impl Into<String>, config: Option<ExperimentConfig>, seeds: Vec<u64>) -> Self {
        Self {
            format_version: REPORT_VERSION,
            command: command.into(),
            config,
            seeds,
            inputs: Vec::new(),
            training: Vec::new(),
            importance: None,
            head_sets: Vec::new(),
            dissociation: Vec::new(),
            similarity: Vec::new(),
            transfer: None,
            correlation: Vec::new(),
            comparison: None,
            checks: Vec::new(),
        }
    }

    /// Companion CSVs as `(file name, content)`, in a fixed order.
    pub fn csv_files(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(imp) = &self.importance {
            out.push(("importance.csv".into(), imp.to_csv()));
        }
        if !self.head_sets.is_empty() {
            out.push(("head_sets.csv".into(), head_sets_csv(&self.head_sets)));
        }
        for (k, d) in self.dissociation.iter().enumerate() {
            let name = if self.dissociation.len() == 1 { "dissociation.csv".into() } else { format!("dissociation_{k}.csv") };
            out.push((name, d.to_csv()));
            if let Some(ov) = &d.overlap {
                let name = if self.dissociation.len() == 1 { "overlap.csv".into() } else { format!("overlap_{k}.csv") };
                out.push((name, overlap_csv(&d.tasks, ov)));
            }
        }
        for m in &self.similarity {
            let name = serde_json::to_value(m.metric).unwrap();
            out.push((format!("similarity_{}.csv", name.as_str().unwrap().to_lowercase()), m.to_csv()));
        }
        if let Some(t) = &self.transfer {
            out.push(("transfer.csv".into(), transfer_csv(t)));
        }
        if !self.correlation.is_empty() {
            out.push(("correlation.csv".into(), correlation_csv(&self.correlation)));
        }
        for tr in &self.training {
            if let Some(m) = &tr.iat {
                let n_heads = m.masks.first().map_or(1, |v| v.len()) / layers_of(m).max(1);
                out.push((format!("iat_masks_{}.csv", tr.seed), m.to_csv(n_heads.max(1))));
            }
        }
        out
    }
}

fn layers_of(m: &IatMasks) -> usize {
    m.sets.iter().flat_map(|s| s.members.iter().map(|h| h.layer + 1)).max().unwrap_or(1)
}

pub fn head_sets_csv(sets: &[HeadSet]) -> String {
    let mut out = String::from("task,mode,alpha,rank,layer,head\n");
    for s in sets {
        let mode = serde_json::to_value(s.mode).unwrap();
        for (r, h) in s.members.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},{}", s.task, mode.as_str().unwrap(), s.alpha, r, h.layer, h.head).unwrap();
        }
    }
    out
}

pub fn overlap_csv(tasks: &[String], ov: &[Vec<f64>]) -> String {
    let mut out = String::from("task");
    for t in tasks {
        write!(out, ",{t}").unwrap();
    }
    out.push('\n');
    for (t, row) in tasks.iter().zip(ov) {
        out.push_str(t);
        for v in row {
            write!(out, ",{}", percent2(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn transfer_csv(t: &TransferMatrix) -> String {
    let mut out = String::from("source,target,k,value\n");
    for (i, a) in t.tasks.iter().enumerate() {
        for (j, b) in t.tasks.iter().enumerate() {
            if let Some(v) = t.values[i][j] {
                writeln!(out, "{a},{b},{},{}", t.k, sig_digits(v, 9)).unwrap();
            }
        }
    }
    out
}

/// Scatter data of every correlation, one point per row.
pub fn correlation_csv(cs: &[NamedCorrelation]) -> String {
    let mut out = String::from("x,y,label,x_value,y_value\n");
    for c in cs {
        for (k, (x, y)) in c.stats.points.iter().enumerate() {
            let label = c.stats.labels.get(k).map(String::as_str).unwrap_or("");
            writeln!(out, "{},{},{label},{},{}", c.x, c.y, sig_digits(*x, 9), sig_digits(*y, 9)).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub command: String,
    pub total_seconds: f64,
    pub stages: Vec<Stage>,
}

impl Timing {
    pub fn stage<R>(&mut self, name: &str, f: impl FnOnce() -> R) -> R {
        let t = std::time::Instant::now();
        let r = f();
        let seconds = t.elapsed().as_secs_f64();
        self.total_seconds += seconds;
        self.stages.push(Stage { name: name.into(), seconds });
        r
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, its CSVs and, when given, `timing.json` into `dir`.
/// Returns the paths written.
pub fn emit_report(dir: &Path, report: &ExperimentReport, timing: Option<&Timing>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    let p = dir.join("report.json");
    write(&p, json.as_bytes())?;
    written.push(p);
    for (name, content) in report.csv_files() {
        let p = dir.join(name);
        write(&p, content.as_bytes())?;
        written.push(p);
    }
    if let Some(t) = timing {
        let p = dir.join("timing.json");
        write(&p, serde_json::to_string_pretty(t)?.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissociation::{PerfTable, Thresholds};

    #[test]
    fn empty_sections_absent() {
        let r = ExperimentReport::new("dissociate", None, vec![]);
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["command", "format_version", "seeds"]);
        assert!(!serde_json::to_string(&r).unwrap().contains("null"));
        assert!(r.csv_files().is_empty());
    }

    #[test]
    fn dissociation_csv_written_and_round_trips() {
        let t = PerfTable::new(vec!["a".into(), "b".into()], vec![90.0, 80.0], vec![vec![70.0, 79.0], vec![88.0, 60.0]]).unwrap();
        let mut r = ExperimentReport::new("dissociate", None, vec![1]);
        r.dissociation.push(DissociationReport::from_table(t.clone(), 0.3, &Thresholds::default()));
        let d = tempfile::tempdir().unwrap();
        let files = emit_report(d.path(), &r, Some(&Timing::default())).unwrap();
        assert_eq!(files.len(), 3);
        let back = PerfTable::from_csv(&fs::read_to_string(d.path().join("dissociation.csv")).unwrap()).unwrap();
        assert_eq!(back, t);
        let json: ExperimentReport = serde_json::from_slice(&fs::read(d.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json, r);
    }

    #[test]
    fn timing_accumulates() {
        let mut t = Timing::default();
        let x = t.stage("a", || 3);
        assert_eq!(x, 3);
        assert_eq!(t.stages.len(), 1);
    }
}
