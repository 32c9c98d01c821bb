//! Multi-task training with optional important-head training (IAT).
//!
//! Every step draws a task from the sampling law, draws that task's next
//! batch and updates the shared encoder plus that task's output head. From
//! step `ceil((1 − δ) · total)` on, each task only updates the attention
//! slices of its own top-α heads; everything outside multi-head attention
//! keeps training normally.
//!
//! All randomness is derived from `(seed, purpose, step)` so a trainer can be
//! checkpointed between any two steps and resumed bit-exactly.

mod bootstrap;
mod sampling;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, AdamConfig, LrDecay, Tensor};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};
use crate::importance::{head_importance, select_heads, HeadSet, ImportanceOptions, SelectionMode};
use crate::model::{batch_gradients, score, HeadId, ModelState};
use crate::tasks::{Example, TaskData};

pub use bootstrap::{paired_bootstrap, BootstrapResult};
pub use sampling::{sample_task, sampling_probs, SamplingMode, StreamState};

use sampling::{STREAM_DROPOUT, STREAM_SHUFFLE};

fn default_epochs() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.3
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> f64 {
    0.1
}
fn default_selection() -> SelectionMode {
    SelectionMode::Top
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub sampling: SamplingMode,
    /// Fraction of steps, at the end, trained in IAT mode.
    #[serde(default)]
    pub delta: f64,
    /// Fraction of heads each task keeps tunable during IAT.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Which heads IAT keeps tunable; `random` is the ablation baseline.
    #[serde(default = "default_selection")]
    pub iat_selection: SelectionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_proportion: f64,
    #[serde(default)]
    pub decay: LrDecay,
    #[serde(default)]
    pub importance: ImportanceOptions,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 5,
            sampling: SamplingMode::Proportional,
            delta: 0.0,
            alpha: 0.3,
            iat_selection: SelectionMode::Top,
            seed: 0,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_proportion: 0.1,
            decay: LrDecay::Constant,
            importance: ImportanceOptions::default(),
        }
    }
}

fn cfg_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(cfg_err("epochs", "must be >= 1"));
        }
        if self.sampling == SamplingMode::Annealed && self.epochs < 2 {
            return Err(cfg_err("epochs", "annealed sampling needs at least 2 epochs"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(cfg_err("delta", "must be in [0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(cfg_err("alpha", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(cfg_err("learning_rate", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return Err(cfg_err("warmup_proportion", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, sizes: &[usize]) -> usize {
        sizes.iter().sum::<usize>().div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, sizes: &[usize]) -> usize {
        self.epochs * self.steps_per_epoch(sizes)
    }

    /// First IAT step; equals `total` when `δ = 0`.
    pub fn iat_start(&self, total: usize) -> usize {
        (((1.0 - self.delta) * total as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn adam(&self, total: usize) -> AdamConfig {
        AdamConfig {
            warmup_proportion: self.warmup_proportion,
            decay: self.decay,
            ..AdamConfig::new(self.learning_rate, total)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mtl,
    Iat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
    pub phase: Phase,
}

/// Per-task head masks for IAT; `masks[i][h]` marks head `h` tunable for
/// task `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IatMasks {
    pub start_step: usize,
    pub sets: Vec<HeadSet>,
    pub masks: Vec<Vec<bool>>,
}

impl IatMasks {
    pub fn from_sets(start_step: usize, sets: Vec<HeadSet>, n_layers: usize, n_heads: usize) -> Self {
        let masks = sets.iter().map(|s| s.indicator(n_layers, n_heads)).collect();
        Self { start_step, sets, masks }
    }

    /// `task,layer,head,mask`.
    pub fn to_csv(&self, n_heads: usize) -> String {
        let mut out = String::from("task,layer,head,mask\n");
        for (s, m) in self.sets.iter().zip(&self.masks) {
            for (i, &b) in m.iter().enumerate() {
                let h = HeadId::from_flat(i, n_heads);
                writeln!(out, "{},{},{},{}", s.task, h.layer, h.head, b as u8).unwrap();
            }
        }
        out
    }
}

/// Element masks that freeze the attention slices of heads not in
/// `tunable`. `None` everywhere when every head is tunable.
pub fn update_masks<T: crate::autograd::Real>(model: &ModelState<T>, tunable: &[bool]) -> Vec<Option<Vec<bool>>> {
    let mut out: Vec<Option<Vec<bool>>> = vec![None; model.params().len()];
    if tunable.iter().all(|&b| b) {
        return out;
    }
    for (flat, _) in tunable.iter().enumerate().filter(|(_, &b)| !b) {
        let s = model.head_slices(HeadId::from_flat(flat, model.config.n_heads));
        for (pi, cols) in &s.columns {
            let (r, c) = model.params()[*pi].dims2().unwrap();
            let m = out[*pi].get_or_insert_with(|| vec![true; r * c]);
            for i in 0..r {
                for j in cols.clone() {
                    m[i * c + j] = false;
                }
            }
        }
        for (pi, rows) in &s.rows {
            let (r, c) = model.params()[*pi].dims2().unwrap();
            let m = out[*pi].get_or_insert_with(|| vec![true; r * c]);
            for i in rows.clone() {
                m[i * c..(i + 1) * c].fill(false);
            }
        }
    }
    out
}

/// Resumable trainer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub streams: Vec<StreamState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masks: Option<IatMasks>,
}

pub struct Trainer {
    pub model: ModelState<f32>,
    pub optim: Adam<f32>,
    pub schedule: TrainSchedule,
    pub state: TrainerState,
    tasks: Vec<TaskData>,
    heads: Vec<usize>,
    names: Vec<String>,
    exec: Exec,
}

impl Trainer {
    /// Fresh run over `tasks`, each of which must have a registered head.
    pub fn new(model: ModelState<f32>, tasks: Vec<TaskData>, schedule: TrainSchedule, exec: Exec) -> Result<Self> {
        let state = TrainerState { step: 0, streams: vec![StreamState::default(); tasks.len()], masks: None };
        let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
        let optim = Adam::new(schedule.adam(schedule.total_steps(&sizes)), model.params());
        Self::resume(model, optim, tasks, schedule, state, exec)
    }

    pub fn resume(
        model: ModelState<f32>,
        optim: Adam<f32>,
        tasks: Vec<TaskData>,
        schedule: TrainSchedule,
        state: TrainerState,
        exec: Exec,
    ) -> Result<Self> {
        schedule.validate()?;
        if tasks.is_empty() {
            return Err(Error::invalid("training needs at least one task"));
        }
        if let Some(t) = tasks.iter().find(|t| t.train.is_empty()) {
            return Err(Error::invalid(format!("task `{}` has no training examples", t.spec.name)));
        }
        let heads = tasks.iter().map(|t| model.task_index(&t.spec.name)).collect::<Result<Vec<_>>>()?;
        if state.streams.len() != tasks.len() {
            return Err(Error::Checkpoint("trainer state does not match the task list".into()));
        }
        if optim.moments().len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let names = model.names().to_vec();
        Ok(Self { model, optim, schedule, state, tasks, heads, names, exec })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.train.len()).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps(&self.sizes())
    }

    pub fn iat_start(&self) -> usize {
        self.schedule.iat_start(self.total_steps())
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn phase(&self) -> Phase {
        if self.state.masks.is_some() {
            Phase::Iat
        } else {
            Phase::Mtl
        }
    }

    /// Scores every task, selects its heads and installs the IAT masks.
    pub fn enter_iat_phase(&mut self) -> Result<&IatMasks> {
        if self.state.masks.is_some() {
            return Err(Error::invalid("IAT phase already entered"));
        }
        let (l, h) = (self.model.config.n_layers, self.model.config.n_heads);
        let mut sets = Vec::with_capacity(self.tasks.len());
        for (i, t) in self.tasks.iter().enumerate() {
            let row = head_importance(&self.model, self.heads[i], &t.train, &self.schedule.importance, self.exec)?;
            let seed = mix_seed(&[self.schedule.seed, 0x1A7, i as u64]);
            sets.push(select_heads(&row, h, self.schedule.alpha, self.schedule.iat_selection, Some(seed))?);
        }
        self.state.masks = Some(IatMasks::from_sets(self.state.step, sets, l, h));
        Ok(self.state.masks.as_ref().unwrap())
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let total = self.total_steps();
        let step = self.state.step;
        if step >= total {
            return Err(Error::StepBudgetExceeded { step, planned: total });
        }
        if self.state.masks.is_none() && self.schedule.delta > 0.0 && step >= self.iat_start() {
            self.enter_iat_phase()?;
        }
        let sizes = self.sizes();
        let spe = self.schedule.steps_per_epoch(&sizes);
        let epoch = (step / spe + 1).min(self.schedule.epochs);
        let probs = sampling_probs(&sizes, epoch, self.schedule.epochs, self.schedule.sampling)?;
        let t = sample_task(&probs, self.schedule.seed, step);
        let idx = self.state.streams[t].next_batch(sizes[t], self.schedule.batch_size, self.schedule.seed, t);
        let batch: Vec<Example> = idx.iter().map(|&i| self.tasks[t].train[i].clone()).collect();
        let dropout = mix_seed(&[self.schedule.seed, STREAM_DROPOUT, step as u64]);
        let g = batch_gradients(&self.model, self.heads[t], &batch, Some(dropout), self.exec)?;
        if !g.loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss of task `{}` at step {step}", self.tasks[t].spec.name)));
        }
        let trainable = match &self.state.masks {
            Some(m) => update_masks(&self.model, &m.masks[t]),
            None => vec![None; self.names.len()],
        };
        let lr = self.optim.step(self.model.params_mut(), &self.names, &g.grads, &trainable)?;
        self.state.step += 1;
        Ok(LogRecord { step, epoch, task: self.tasks[t].spec.name.clone(), loss: g.loss, lr, phase: self.phase() })
    }

    /// Runs to `until` (capped at the planned total), reporting each record.
    pub fn run_until(&mut self, until: usize, mut on_log: impl FnMut(&LogRecord)) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.state.step < until {
            let rec = self.step()?;
            on_log(&rec);
        }
        Ok(())
    }

    pub fn run(&mut self, on_log: impl FnMut(&LogRecord)) -> Result<()> {
        self.run_until(usize::MAX, on_log)
    }

    /// Dev-split metric per task, in task order.
    pub fn evaluate(&self) -> Result<Vec<f64>> {
        self.tasks
            .iter()
            .zip(&self.heads)
            .map(|(t, &h)| score(&self.model, h, &t.dev, t.spec.metric, None, self.exec))
            .collect()
    }

    pub fn into_parts(self) -> (ModelState<f32>, Adam<f32>, TrainerState) {
        (self.model, self.optim, self.state)
    }
}

/// Trains `tasks` jointly from `model` and returns the trained model and log.
pub fn train_multitask(
    model: ModelState<f32>,
    tasks: Vec<TaskData>,
    schedule: TrainSchedule,
    exec: Exec,
) -> Result<(ModelState<f32>, Vec<LogRecord>)> {
    if tasks.len() < 2 {
        return Err(Error::invalid("multi-task training needs at least two tasks"));
    }
    let mut tr = Trainer::new(model, tasks, schedule, exec)?;
    let mut log = Vec::new();
    tr.run(|r| log.push(r.clone()))?;
    Ok((tr.model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferOptions {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self { k: 16, epochs: 20, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub task: String,
    pub k: usize,
    pub steps: usize,
    pub metric: f64,
}

/// Fine-tunes a copy of `pretrained` with a fresh output head on `k` seeded
/// training samples of `task` and returns its dev metric.
pub fn transfer_finetune(
    pretrained: &ModelState<f32>,
    task: &TaskData,
    opts: &TransferOptions,
    exec: Exec,
) -> Result<TransferResult> {
    if opts.k == 0 || opts.k > task.train.len() {
        return Err(Error::invalid(format!("k = {} outside [1, {}]", opts.k, task.train.len())));
    }
    if task.dev.is_empty() {
        return Err(Error::invalid("transfer evaluation needs dev examples"));
    }
    let mut model = pretrained.clone();
    model.gates = crate::model::HeadGateVector::ones(model.config.n_layers, model.config.n_heads);
    model.reset_task_head(&task.spec.name, task.spec.kind, mix_seed(&[opts.seed, 0x7F]))?;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, STREAM_SHUFFLE, u64::MAX])));
    let mut few = task.clone();
    few.train = order[..opts.k].iter().map(|&i| task.train[i].clone()).collect();
    let schedule = TrainSchedule {
        epochs: opts.epochs,
        seed: opts.seed,
        batch_size: opts.batch_size.min(opts.k),
        learning_rate: opts.learning_rate,
        ..Default::default()
    };
    let mut tr = Trainer::new(model, vec![few], schedule, exec)?;
    tr.run(|_| {})?;
    let metric = tr.evaluate()?[0];
    Ok(TransferResult { task: task.spec.name.clone(), k: opts.k, steps: tr.state.step, metric })
}

/// Element-wise equality of two parameter lists.
pub fn params_equal(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}
