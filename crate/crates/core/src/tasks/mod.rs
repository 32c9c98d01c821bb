//! Task registry, dataset ingestion, synthetic task generators and metrics.

pub mod metrics;
mod pairs;
mod synth;
mod tsv;
mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{evaluate, MetricKind};
pub use pairs::{make_pair_dataset, PairStats, PAIR_DIFFERENT, PAIR_SAME};
pub use synth::{synth_task, SynthKind, SynthSpec};
pub use tsv::{load_tsv, parse_tsv, write_tsv};
pub use vocab::{Encoding, Vocabulary, CLS, PAD, SEP, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    SingleSentence,
    SentencePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum TaskKind {
    Classification { n_class: usize },
    Regression,
}

impl TaskKind {
    /// Width of the output layer.
    pub fn output_width(self) -> usize {
        match self {
            TaskKind::Classification { n_class } => n_class,
            TaskKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub paradigm: Paradigm,
    pub kind: TaskKind,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, paradigm: Paradigm, kind: TaskKind, metric: MetricKind) -> Result<Self> {
        let spec = Self { name: name.into(), paradigm, kind, metric };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(|c: char| c.is_whitespace() || c == ',') {
            return Err(Error::invalid(format!("task name `{}` must be non-empty without spaces or commas", self.name)));
        }
        match (self.kind, self.metric) {
            (TaskKind::Regression, MetricKind::Spearman) => Ok(()),
            (TaskKind::Regression, m) => {
                Err(Error::invalid(format!("task `{}`: metric {m:?} needs a classification task", self.name)))
            }
            (TaskKind::Classification { .. }, MetricKind::Spearman) => {
                Err(Error::invalid(format!("task `{}`: spearman needs a regression task", self.name)))
            }
            (TaskKind::Classification { n_class }, _) if n_class < 2 => {
                Err(Error::invalid(format!("task `{}`: n_class must be >= 2", self.name)))
            }
            (TaskKind::Classification { n_class }, MetricKind::F1 | MetricKind::Matthews) if n_class != 2 => Err(
                Error::invalid(format!("task `{}`: F1 and Matthews are defined for binary tasks only", self.name)),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Label,
}

impl LabeledExample {
    pub fn check(&self, spec: &TaskSpec) -> Result<()> {
        match (spec.paradigm, &self.text_b) {
            (Paradigm::SingleSentence, Some(_)) => return Err(Error::invalid("single-sentence example has text B")),
            (Paradigm::SentencePair, None) => return Err(Error::invalid("sentence-pair example lacks text B")),
            _ => {}
        }
        match (spec.kind, self.label) {
            (TaskKind::Classification { n_class }, Label::Class(c)) if c < n_class => Ok(()),
            (TaskKind::Classification { n_class }, l) => {
                Err(Error::invalid(format!("label {l:?} is not a class index below {n_class}")))
            }
            (TaskKind::Regression, Label::Value(v)) if v.is_finite() => Ok(()),
            (TaskKind::Regression, l) => Err(Error::invalid(format!("label {l:?} is not a finite real value"))),
        }
    }
}

/// Raw (text) dataset for one task, split into train and dev.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
}

impl Dataset {
    /// Splits `examples` by a seeded shuffle; `train_ratio` of them go to train.
    pub fn split(spec: TaskSpec, mut examples: Vec<LabeledExample>, train_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_ratio) {
            return Err(Error::invalid(format!("train ratio {train_ratio} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        examples.shuffle(&mut rng);
        let n_train = ((examples.len() as f64) * train_ratio).round() as usize;
        let dev = examples.split_off(n_train.min(examples.len()));
        Ok(Self { spec, train: examples, dev })
    }

    pub fn encode(&self, vocab: &Vocabulary, max_len: usize) -> TaskData {
        let enc = |xs: &[LabeledExample]| {
            xs.iter()
                .map(|x| Example {
                    input: vocab.encode(&x.text_a, x.text_b.as_deref(), max_len).unpadded(),
                    label: x.label,
                })
                .collect()
        };
        TaskData { spec: self.spec.clone(), train: enc(&self.train), dev: enc(&self.dev) }
    }
}

/// Token ids and segment ids without padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: EncodedInput,
    pub label: Label,
}

/// Encoded task ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}
