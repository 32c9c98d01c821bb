//! Experiment configuration: one JSON document describing the model, the
//! tasks, the training schedule and the analysis options.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dissociation::Thresholds;
use crate::error::{Error, Result};
use crate::importance::{ImportanceOptions, SelectionMode};
use crate::model::{ActivationKind, ModelConfig, ModelState, Pooling};
use crate::similarity::{RdmCorrelation, SimilarityMetric};
use crate::tasks::{
    load_tsv, make_pair_dataset, synth_task, Dataset, EncodedInput, MetricKind, Paradigm, SynthSpec, TaskData,
    TaskKind, TaskSpec, Vocabulary,
};
use crate::train::{TrainSchedule, TransferOptions};

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "HEADLAB_OUT";
pub const DEFAULT_OUT: &str = "headlab-out";

fn cfg_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => cfg_err(format!("{prefix}.{field}"), message),
        Error::InvalidArgument(message) => cfg_err(prefix, message),
        e => e,
    }
}

fn one() -> u32 {
    CONFIG_VERSION
}

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Defaults to `d_model / n_heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<usize>,
    /// Defaults to `4 · d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub pooling: Pooling,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelSpec {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        let head = self.d_model / self.n_heads.max(1);
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_k: self.d_k.unwrap_or(head),
            d_v: self.d_v.unwrap_or(head),
            d_ff: self.d_ff.unwrap_or(4 * self.d_model),
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            activation: self.activation,
            causal: self.causal,
            pooling: self.pooling,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSource {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub paradigm: Paradigm,
    pub kind: TaskKind,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSource {
    /// Earlier single-sentence classification task to pair up.
    pub from: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    Synth(SynthSpec),
    Tsv(TsvSource),
    Pairs(PairSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: TaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_min_freq")]
    pub vocab_min_freq: usize,
}

fn default_train_ratio() -> f64 {
    0.8
}
fn default_min_freq() -> usize {
    1
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { train_ratio: 0.8, split_seed: 0, vocab_min_freq: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Fraction of heads pruned per task.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
    #[serde(default)]
    pub importance: ImportanceOptions,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub similarity: Vec<SimilarityMetric>,
    #[serde(default)]
    pub rdm_correlation: RdmCorrelation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_file: Option<PathBuf>,
    /// Encoder layer for representations; last layer when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representation_layer: Option<usize>,
    #[serde(default = "default_rep_pooling")]
    pub representation_pooling: Pooling,
    #[serde(default)]
    pub transfer: TransferOptions,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn default_alpha() -> f64 {
    0.3
}
fn default_selection() -> SelectionMode {
    SelectionMode::Top
}
fn default_rep_pooling() -> Pooling {
    Pooling::Mean
}
fn default_resamples() -> usize {
    10_000
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            selection: SelectionMode::Top,
            importance: ImportanceOptions::default(),
            thresholds: Thresholds::default(),
            similarity: Vec::new(),
            rdm_correlation: RdmCorrelation::Spearman,
            probe_file: None,
            representation_layer: None,
            representation_pooling: Pooling::Mean,
            transfer: TransferOptions::default(),
            bootstrap_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "one")]
    pub version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataOptions,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config document. Relative paths inside it are resolved
    /// against `base_dir` by [`ExperimentConfig::resolve`].
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| cfg_err("(document)", e.to_string()))
    }

    /// Reads, parses, resolves paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative data path absolute under `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.tasks {
            if let TaskSource::Tsv(s) = &mut t.source {
                fix(&mut s.train);
                if let Some(d) = &mut s.dev {
                    fix(d);
                }
            }
        }
        if let Some(p) = &mut self.analysis.probe_file {
            fix(p);
        }
    }

    /// Checks everything that can be checked before any data is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err("version", format!("unsupported version {}; expected {CONFIG_VERSION}", self.version)));
        }
        let probe = self.model.to_config(4);
        probe.validate().map_err(|e| prefixed("model", e))?;
        if !self.model.d_model.is_multiple_of(self.model.n_heads) && self.model.d_v.is_none() {
            return Err(cfg_err("model.d_v", "d_model is not divisible by n_heads; set d_k and d_v"));
        }
        let d = &self.data;
        if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
            return Err(cfg_err("data.train_ratio", "must be in (0, 1)"));
        }
        if d.vocab_min_freq == 0 {
            return Err(cfg_err("data.vocab_min_freq", "must be >= 1"));
        }
        if self.tasks.is_empty() {
            return Err(cfg_err("tasks", "at least one task is required"));
        }
        let mut seen = HashSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let f = |s: &str| format!("tasks[{i}].{s}");
            if t.name.is_empty() || t.name.contains(|c: char| c.is_whitespace() || c == ',') {
                return Err(cfg_err(f("name"), "must be non-empty without spaces or commas"));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(cfg_err(f("name"), format!("duplicate task `{}`", t.name)));
            }
            match &t.source {
                TaskSource::Synth(s) => {
                    let n_class = s.kind.task_kind().output_width().max(2);
                    if s.size < 2 * n_class {
                        return Err(cfg_err(f("synth.size"), format!("must be >= {}", 2 * n_class)));
                    }
                }
                TaskSource::Tsv(s) => {
                    TaskSpec::new(&t.name, s.paradigm, s.kind, s.metric).map_err(|e| prefixed(&f("tsv"), e))?;
                    for (name, p) in [("train", Some(&s.train)), ("dev", s.dev.as_ref())] {
                        if let Some(p) = p {
                            if !p.is_file() {
                                return Err(cfg_err(f(&format!("tsv.{name}")), format!("{} does not exist", p.display())));
                            }
                        }
                    }
                }
                TaskSource::Pairs(p) => {
                    let src = self.tasks[..i].iter().find(|s| s.name == p.from);
                    let ok = match src.map(|s| &s.source) {
                        Some(TaskSource::Synth(s)) => s.kind.paradigm() == Paradigm::SingleSentence,
                        Some(TaskSource::Tsv(s)) => {
                            s.paradigm == Paradigm::SingleSentence && matches!(s.kind, TaskKind::Classification { .. })
                        }
                        _ => false,
                    };
                    if !ok {
                        return Err(cfg_err(
                            f("pairs.from"),
                            format!("`{}` must name an earlier single-sentence classification task", p.from),
                        ));
                    }
                }
            }
        }
        self.schedule.validate().map_err(|e| prefixed("schedule", e))?;
        let a = &self.analysis;
        if !(a.alpha > 0.0 && a.alpha <= 1.0) {
            return Err(cfg_err("analysis.alpha", "must be in (0, 1]"));
        }
        if a.importance.batch_size == 0 || a.importance.max_batches == 0 {
            return Err(cfg_err("analysis.importance", "batch_size and max_batches must be >= 1"));
        }
        if !(a.importance.loss_scale > 0.0 && a.importance.loss_scale.is_finite()) {
            return Err(cfg_err("analysis.importance.loss_scale", "must be > 0"));
        }
        if let Some(l) = a.representation_layer {
            if l >= self.model.n_layers {
                return Err(cfg_err("analysis.representation_layer", format!("must be < n_layers = {}", self.model.n_layers)));
            }
        }
        if let Some(p) = &a.probe_file {
            if !p.is_file() {
                return Err(cfg_err("analysis.probe_file", format!("{} does not exist", p.display())));
            }
        }
        let needs_probes = a.similarity.iter().any(|m| matches!(m, SimilarityMetric::Dse | SimilarityMetric::Cra));
        if needs_probes && a.probe_file.is_none() {
            return Err(cfg_err("analysis.probe_file", "DSE and CRA need a probe file"));
        }
        if a.transfer.k == 0 || a.transfer.epochs == 0 || a.transfer.batch_size == 0 {
            return Err(cfg_err("analysis.transfer", "k, epochs and batch_size must be >= 1"));
        }
        if a.bootstrap_resamples == 0 {
            return Err(cfg_err("analysis.bootstrap_resamples", "must be >= 1"));
        }
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }
}

/// Output directory: explicit flag, then `HEADLAB_OUT`, then the config,
/// then `headlab-out`.
pub fn resolve_output_dir(flag: Option<&Path>, env: Option<OsString>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(e) = env.filter(|e| !e.is_empty()) {
        return PathBuf::from(e);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Loaded and encoded data for an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub model_config: ModelConfig,
    pub datasets: Vec<Dataset>,
    pub tasks: Vec<TaskData>,
}

impl Prepared {
    pub fn task_heads(&self) -> Vec<(String, TaskKind)> {
        self.tasks.iter().map(|t| (t.spec.name.clone(), t.spec.kind)).collect()
    }

    /// Fresh model with one output head per task, initialized from `seed`.
    pub fn init_model(&self, seed: u64) -> Result<ModelState<f32>> {
        ModelState::new(self.model_config.clone(), &self.task_heads(), seed)
    }

    pub fn task(&self, name: &str) -> Result<&TaskData> {
        self.tasks.iter().find(|t| t.spec.name == name).ok_or_else(|| Error::UnknownTask(name.into()))
    }

    /// Subset of tasks in the given order.
    pub fn select(&self, names: &[String]) -> Result<Vec<TaskData>> {
        names.iter().map(|n| self.task(n).cloned()).collect()
    }
}

fn load_dataset(cfg: &ExperimentConfig, t: &TaskConfig, done: &[Dataset]) -> Result<Dataset> {
    let d = &cfg.data;
    match &t.source {
        TaskSource::Synth(s) => {
            let (spec, xs) = synth_task(&t.name, s.kind, s.size, s.seed)?;
            Dataset::split(spec, xs, d.train_ratio, s.seed ^ d.split_seed)
        }
        TaskSource::Tsv(s) => {
            let spec = TaskSpec::new(&t.name, s.paradigm, s.kind, s.metric)?;
            load_tsv(&s.train, &spec, s.dev.as_deref(), d.train_ratio, d.split_seed)
        }
        TaskSource::Pairs(p) => {
            let src = done.iter().find(|x| x.spec.name == p.from).ok_or_else(|| Error::UnknownTask(p.from.clone()))?;
            let (train, _) = make_pair_dataset(&src.train, p.seed)?;
            let (dev, _) = make_pair_dataset(&src.dev, p.seed ^ 1)?;
            let spec = TaskSpec::new(&t.name, Paradigm::SentencePair, TaskKind::Classification { n_class: 2 }, MetricKind::Accuracy)?;
            Ok(Dataset { spec, train, dev })
        }
    }
}

/// Loads every task, builds the vocabulary over all training text and
/// encodes train and dev splits.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let mut datasets: Vec<Dataset> = Vec::with_capacity(cfg.tasks.len());
    for t in &cfg.tasks {
        let ds = load_dataset(cfg, t, &datasets)?;
        if ds.train.is_empty() || ds.dev.is_empty() {
            return Err(cfg_err(format!("tasks.{}", t.name), "needs non-empty train and dev splits"));
        }
        datasets.push(ds);
    }
    let texts = datasets
        .iter()
        .flat_map(|d| d.train.iter())
        .flat_map(|x| std::iter::once(x.text_a.as_str()).chain(x.text_b.as_deref()));
    let vocab = Vocabulary::build(texts, cfg.data.vocab_min_freq);
    with_vocab(cfg, vocab, datasets)
}

/// Encodes `datasets` with an existing vocabulary (e.g. one restored from a
/// checkpoint).
pub fn with_vocab(cfg: &ExperimentConfig, vocab: Vocabulary, datasets: Vec<Dataset>) -> Result<Prepared> {
    let model_config = cfg.model.to_config(vocab.len());
    model_config.validate().map_err(|e| prefixed("model", e))?;
    let tasks = datasets.iter().map(|d| d.encode(&vocab, model_config.max_seq_len)).collect();
    Ok(Prepared { vocab, model_config, datasets, tasks })
}

/// Loads datasets and encodes them with `vocab`.
pub fn prepare_with_vocab(cfg: &ExperimentConfig, vocab: Vocabulary) -> Result<Prepared> {
    let mut datasets: Vec<Dataset> = Vec::with_capacity(cfg.tasks.len());
    for t in &cfg.tasks {
        let ds = load_dataset(cfg, t, &datasets)?;
        datasets.push(ds);
    }
    with_vocab(cfg, vocab, datasets)
}

/// One probe sentence per line; a tab separates the two halves of a pair.
/// Blank lines are skipped.
pub fn parse_probes(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<EncodedInput> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once('\t') {
            Some((a, b)) => vocab.encode(a, Some(b), max_len).unpadded(),
            None => vocab.encode(l, None, max_len).unpadded(),
        })
        .collect()
}

pub fn load_probes(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedInput>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probes = parse_probes(&text, vocab, max_len);
    if probes.len() < 2 {
        return Err(cfg_err("analysis.probe_file", "needs at least two probe sentences"));
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"n_layers": 2, "n_heads": 4, "d_model": 16, "max_seq_len": 24, "dropout": 0.0},
        "tasks": [
            {"name": "parity", "synth": {"kind": "marker-parity", "size": 40, "seed": 1}},
            {"name": "equal", "synth": {"kind": "pair-equality", "size": 40, "seed": 2}},
            {"name": "topic", "synth": {"kind": "topic", "n_class": 2, "size": 40, "seed": 3}},
            {"name": "topic-pair", "pairs": {"from": "topic", "seed": 4}}
        ],
        "schedule": {"epochs": 1, "seed": 7}
    }"#;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            e => panic!("not a config error: {e}"),
        }
    }

    fn edit(f: impl FnOnce(&mut serde_json::Value)) -> Result<()> {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        f(&mut v);
        ExperimentConfig::from_json(&v.to_string())?.validate()
    }

    #[test]
    fn minimal_config_prepares() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.tasks.len(), 4);
        assert_eq!(p.model_config.d_ff, 64);
        assert_eq!(p.tasks[3].train.len(), p.datasets[2].train.len());
        let m = p.init_model(cfg.schedule.seed).unwrap();
        assert_eq!(m.heads().len(), 4);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn field_level_errors() {
        assert_eq!(field_of(edit(|v| v["schedule"]["delta"] = 1.5.into()).unwrap_err()), "schedule.delta");
        assert_eq!(field_of(edit(|v| v["analysis"] = serde_json::json!({"alpha": 0.0})).unwrap_err()), "analysis.alpha");
        assert_eq!(field_of(edit(|v| v["model"]["d_model"] = 18.into()).unwrap_err()), "model.d_v");
        assert_eq!(field_of(edit(|v| v["tasks"][1]["name"] = "parity".into()).unwrap_err()), "tasks[1].name");
        assert_eq!(field_of(edit(|v| v["tasks"][3]["pairs"]["from"] = "equal".into()).unwrap_err()), "tasks[3].pairs.from");
        let missing = serde_json::json!({"name": "x", "tsv": {"train": "/nonexistent/x.tsv", "paradigm": "single-sentence",
            "kind": {"type": "classification", "n_class": 2}, "metric": "accuracy"}});
        assert_eq!(field_of(edit(|v| v["tasks"][0] = missing).unwrap_err()), "tasks[0].tsv.train");
        assert_eq!(field_of(edit(|v| v["analysis"] = serde_json::json!({"similarity": ["DSE"]})).unwrap_err()), "analysis.probe_file");
        assert_eq!(field_of(edit(|v| v["bogus"] = 1.into()).unwrap_err()), "(document)");
    }

    #[test]
    fn output_dir_precedence() {
        let c = Some(Path::new("cfg"));
        assert_eq!(resolve_output_dir(Some(Path::new("flag")), Some("env".into()), c), PathBuf::from("flag"));
        assert_eq!(resolve_output_dir(None, Some("env".into()), c), PathBuf::from("env"));
        assert_eq!(resolve_output_dir(None, None, c), PathBuf::from("cfg"));
        assert_eq!(resolve_output_dir(None, Some("".into()), None), PathBuf::from(DEFAULT_OUT));
    }

    #[test]
    fn probes_parse_pairs_and_skip_blanks() {
        let v = Vocabulary::build(["a b c"], 1);
        let p = parse_probes("a b\n\n  \na\tc\n", &v, 16);
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].segments.iter().filter(|&&s| s == 1).count(), 2);
    }

    #[test]
    fn tsv_paths_resolve_against_config_dir() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("t.tsv"), "0\ta b\n1\tb c\n0\tc d\n1\td e\n0\te f\n").unwrap();
        let cfg = r#"{"model": {"n_layers": 1, "n_heads": 2, "d_model": 8, "max_seq_len": 8},
            "tasks": [{"name": "t", "tsv": {"train": "t.tsv", "paradigm": "single-sentence",
                "kind": {"type": "classification", "n_class": 2}, "metric": "accuracy"}}]}"#;
        let path = d.path().join("c.json");
        std::fs::write(&path, cfg).unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        let p = prepare(&c).unwrap();
        assert_eq!(p.tasks[0].train.len() + p.tasks[0].dev.len(), 5);
    }
}
