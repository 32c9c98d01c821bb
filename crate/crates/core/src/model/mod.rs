//! Gated multi-head attention encoder with per-task output heads.
//!
//! # Head parameter layout
//!
//! Each layer stores `W^Q` and `W^K` as `d × (n_h·d_k)` matrices and `W^V`
//! as `d × (n_h·d_v)`. Head `h` owns columns `[h·d_k, (h+1)·d_k)` of `W^Q`,
//! `W^K` and the same entries of `b^Q`, `b^K`; columns `[h·d_v, (h+1)·d_v)`
//! of `W^V` and `b^V`; and rows `[h·d_v, (h+1)·d_v)` of `W^O`. The attention
//! output projection has no bias, so every attention parameter belongs to
//! exactly one head. [`ModelState::head_slices`] exposes this map.

mod eval;
mod forward;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::tasks::TaskKind;

pub use eval::{batch_gradients, predict, predict_one, score, BatchGradients, Prediction};
pub use forward::{EncoderTrace, ForwardOptions, Gates, Graph, HeadCapture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Gelu,
    Relu,
}

impl From<ActivationKind> for Activation {
    fn from(a: ActivationKind) -> Self {
        match a {
            ActivationKind::Gelu => Activation::Gelu,
            ActivationKind::Relu => Activation::Relu,
        }
    }
}

fn default_dropout() -> f64 {
    0.1
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub activation: ActivationKind,
    /// Causal (left-to-right) attention masking.
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// A small encoder with `d_k = d_v = d_model / n_heads`.
    pub fn small(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_k: d_model / n_heads.max(1),
            d_v: d_model / n_heads.max(1),
            d_ff: 2 * d_model,
            vocab_size,
            max_seq_len,
            dropout: 0.0,
            activation: ActivationKind::Gelu,
            causal: false,
            pooling: Pooling::Cls,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config { field: name.into(), message: "must be >= 1".into() });
            }
        }
        if self.n_heads * self.d_v != self.d_model {
            return Err(Error::Config {
                field: "d_v".into(),
                message: format!("n_heads * d_v = {} must equal d_model = {}", self.n_heads * self.d_v, self.d_model),
            });
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config { field: "max_seq_len".into(), message: "must be >= 3".into() });
        }
        if self.vocab_size < 4 {
            return Err(Error::Config { field: "vocab_size".into(), message: "must cover the 4 special tokens".into() });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config { field: "dropout".into(), message: "must be in [0, 1)".into() });
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config { field: "layer_norm_eps".into(), message: "must be > 0".into() });
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Closed-form parameter count for the given task output widths.
    pub fn parameter_count(&self, task_widths: &[usize]) -> usize {
        let (d, h, dk, dv, f) = (self.d_model, self.n_heads, self.d_k, self.d_v, self.d_ff);
        let embed = self.vocab_size * d + self.max_seq_len * d + 2 * d + 2 * d;
        let attn = 2 * (d * h * dk + h * dk) + (d * h * dv + h * dv) + h * dv * d;
        let ffn = d * f + f + f * d + d;
        let per_layer = attn + ffn + 4 * d;
        let heads: usize = task_widths.iter().map(|&c| d * c + c).sum();
        embed + self.n_layers * per_layer + heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn flat(self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }

    pub fn from_flat(i: usize, n_heads: usize) -> Self {
        Self { layer: i / n_heads, head: i % n_heads }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// One gate value per head, each in `[0, 1]`, laid out layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGateVector {
    pub n_layers: usize,
    pub n_heads: usize,
    values: Vec<f32>,
}

impl HeadGateVector {
    pub fn ones(n_layers: usize, n_heads: usize) -> Self {
        Self { n_layers, n_heads, values: vec![1.0; n_layers * n_heads] }
    }

    pub fn new(n_layers: usize, n_heads: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_layers * n_heads {
            return Err(Error::invalid(format!(
                "gate vector needs {} entries, got {}",
                n_layers * n_heads,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("gate value {v} outside [0, 1]")));
        }
        Ok(Self { n_layers, n_heads, values })
    }

    /// All ones except zeros at `pruned`.
    pub fn pruned(n_layers: usize, n_heads: usize, pruned: &[HeadId]) -> Result<Self> {
        let mut g = Self::ones(n_layers, n_heads);
        for &h in pruned {
            g.set(h, 0.0)?;
        }
        Ok(g)
    }

    pub fn get(&self, h: HeadId) -> f32 {
        self.values[h.flat(self.n_heads)]
    }

    pub fn set(&mut self, h: HeadId, v: f32) -> Result<()> {
        if h.layer >= self.n_layers || h.head >= self.n_heads {
            return Err(Error::invalid(format!("head {h} out of range")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("gate value {v} outside [0, 1]")));
        }
        self.values[h.flat(self.n_heads)] = v;
        Ok(())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub name: String,
    pub kind: TaskKind,
    pub pooling: Pooling,
    /// Parameter indices of the `d × width` weight and `1 × width` bias.
    pub weight: usize,
    pub bias: usize,
}

/// Parameter indices of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub ln_g: usize,
    pub ln_b: usize,
    pub layers: Vec<LayerParams>,
}

enum Init {
    Embedding,
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Encoder parameter names and shapes in storage order.
fn encoder_spec(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, dk, dv, f) = (c.d_model, c.n_heads, c.d_k, c.d_v, c.d_ff);
    let mut out = vec![
        ("embed.token".into(), vec![c.vocab_size, d], Init::Embedding),
        ("embed.position".into(), vec![c.max_seq_len, d], Init::Embedding),
        ("embed.segment".into(), vec![2, d], Init::Embedding),
        ("embed.ln.gamma".into(), vec![1, d], Init::Ones),
        ("embed.ln.beta".into(), vec![1, d], Init::Zeros),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("attn.wq"), vec![d, h * dk], Init::Xavier { fan_in: d, fan_out: dk }),
            (p("attn.bq"), vec![1, h * dk], Init::Zeros),
            (p("attn.wk"), vec![d, h * dk], Init::Xavier { fan_in: d, fan_out: dk }),
            (p("attn.bk"), vec![1, h * dk], Init::Zeros),
            (p("attn.wv"), vec![d, h * dv], Init::Xavier { fan_in: d, fan_out: dv }),
            (p("attn.bv"), vec![1, h * dv], Init::Zeros),
            (p("attn.wo"), vec![h * dv, d], Init::Xavier { fan_in: h * dv, fan_out: d }),
            (p("ln1.gamma"), vec![1, d], Init::Ones),
            (p("ln1.beta"), vec![1, d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], Init::Xavier { fan_in: d, fan_out: f }),
            (p("ffn.b1"), vec![1, f], Init::Zeros),
            (p("ffn.w2"), vec![f, d], Init::Xavier { fan_in: f, fan_out: d }),
            (p("ffn.b2"), vec![1, d], Init::Zeros),
            (p("ln2.gamma"), vec![1, d], Init::Ones),
            (p("ln2.beta"), vec![1, d], Init::Zeros),
        ]);
    }
    out
}

fn init_tensor<T: Real>(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Embedding => {
            let dist = Normal::new(0.0f64, 0.5).unwrap();
            (0..n).map(|_| T::lit(dist.sample(rng) as f32 as f64)).collect()
        }
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).unwrap();
            (0..n).map(|_| T::lit(dist.sample(rng) as f32 as f64)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Full parameter set: encoder, task heads and the current gates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    heads: Vec<TaskHead>,
    pub gates: HeadGateVector,
    layout: Layout,
}

fn layout_from_names(config: &ModelConfig, names: &[String]) -> Result<Layout> {
    let find = |n: &str| {
        names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{n}`")))
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| find(&format!("layer{l}.{s}"));
        layers.push(LayerParams {
            wq: p("attn.wq")?,
            bq: p("attn.bq")?,
            wk: p("attn.wk")?,
            bk: p("attn.bk")?,
            wv: p("attn.wv")?,
            bv: p("attn.bv")?,
            wo: p("attn.wo")?,
            ln1_g: p("ln1.gamma")?,
            ln1_b: p("ln1.beta")?,
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
            ln2_g: p("ln2.gamma")?,
            ln2_b: p("ln2.beta")?,
        });
    }
    Ok(Layout {
        tok: find("embed.token")?,
        pos: find("embed.position")?,
        seg: find("embed.segment")?,
        ln_g: find("embed.ln.gamma")?,
        ln_b: find("embed.ln.beta")?,
        layers,
    })
}

/// Per-head column/row ranges inside the attention tensors of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSlices {
    /// `(param index, column range)` for `W^Q, b^Q, W^K, b^K, W^V, b^V`.
    pub columns: Vec<(usize, Range<usize>)>,
    /// `(param index, row range)` for `W^O`.
    pub rows: Vec<(usize, Range<usize>)>,
}

impl<T: Real> ModelState<T> {
    /// Randomly initialized model with one output head per `(name, kind)`.
    pub fn new(config: ModelConfig, tasks: &[(String, TaskKind)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in encoder_spec(&config) {
            params.push(init_tensor(&shape, &init, &mut rng));
            names.push(name);
        }
        let layout = layout_from_names(&config, &names)?;
        let gates = HeadGateVector::ones(config.n_layers, config.n_heads);
        let mut model = Self { config, names, params, heads: Vec::new(), gates, layout };
        for (name, kind) in tasks {
            model.add_task_head(name, *kind, seed)?;
        }
        Ok(model)
    }

    /// Appends a freshly initialized output head. Its initialization depends
    /// only on `seed` and the task name.
    pub fn add_task_head(&mut self, name: &str, kind: TaskKind, seed: u64) -> Result<usize> {
        if self.heads.iter().any(|h| h.name == name) {
            return Err(Error::invalid(format!("task head `{name}` already registered")));
        }
        let width = kind.output_width();
        let name_hash = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, name_hash]));
        let d = self.config.d_model;
        let w = init_tensor(&[d, width], &Init::Xavier { fan_in: d, fan_out: width }, &mut rng);
        let b = init_tensor(&[1, width], &Init::Zeros, &mut rng);
        self.names.push(format!("head.{name}.weight"));
        self.params.push(w);
        self.names.push(format!("head.{name}.bias"));
        self.params.push(b);
        let n = self.params.len();
        self.heads.push(TaskHead { name: name.to_string(), kind, pooling: self.config.pooling, weight: n - 2, bias: n - 1 });
        Ok(self.heads.len() - 1)
    }

    /// Replaces an existing head with a fresh one (transfer fine-tuning).
    pub fn reset_task_head(&mut self, name: &str, kind: TaskKind, seed: u64) -> Result<usize> {
        match self.task_index(name) {
            Ok(i) => {
                let d = self.config.d_model;
                let width = kind.output_width();
                let name_hash = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, name_hash]));
                let (wi, bi) = (self.heads[i].weight, self.heads[i].bias);
                self.params[wi] = init_tensor(&[d, width], &Init::Xavier { fan_in: d, fan_out: width }, &mut rng);
                self.params[bi] = init_tensor(&[1, width], &Init::Zeros, &mut rng);
                self.heads[i].kind = kind;
                Ok(i)
            }
            Err(_) => self.add_task_head(name, kind, seed),
        }
    }

    /// Reassembles a model from stored tensors, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
        heads: Vec<TaskHead>,
        gates: HeadGateVector,
    ) -> Result<Self> {
        config.validate()?;
        if names.len() != params.len() {
            return Err(Error::Checkpoint(format!("{} names for {} tensors", names.len(), params.len())));
        }
        for (name, shape, _) in encoder_spec(&config) {
            let i = names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if params[i].shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {shape:?}",
                    params[i].shape()
                )));
            }
        }
        for h in &heads {
            let want = [config.d_model, h.kind.output_width()];
            if params.get(h.weight).map(|t| t.shape()) != Some(&want[..]) {
                return Err(Error::Checkpoint(format!("task head `{}` weight shape mismatch", h.name)));
            }
        }
        if gates.n_layers != config.n_layers || gates.n_heads != config.n_heads {
            return Err(Error::Checkpoint("gate vector does not match model config".into()));
        }
        let layout = layout_from_names(&config, &names)?;
        Ok(Self { config, names, params, heads, gates, layout })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            heads: self.heads.clone(),
            gates: self.gates.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.heads.iter().position(|h| h.name == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameter ranges owned by `head`.
    pub fn head_slices(&self, head: HeadId) -> HeadSlices {
        let lp = &self.layout.layers[head.layer];
        let (dk, dv) = (self.config.d_k, self.config.d_v);
        let qk = head.head * dk..(head.head + 1) * dk;
        let v = head.head * dv..(head.head + 1) * dv;
        HeadSlices {
            columns: vec![
                (lp.wq, qk.clone()),
                (lp.bq, qk.clone()),
                (lp.wk, qk.clone()),
                (lp.bk, qk),
                (lp.wv, v.clone()),
                (lp.bv, v.clone()),
            ],
            rows: vec![(lp.wo, v)],
        }
    }

    /// Indices of parameters belonging to the multi-head attention modules.
    pub fn attention_param_indices(&self) -> Vec<usize> {
        self.layout.layers.iter().flat_map(|l| [l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo]).collect()
    }

    /// Zeroes the `W^O` rows fed by `head` (structural pruning).
    pub fn zero_output_rows(&mut self, head: HeadId) {
        let slices = self.head_slices(head);
        for (pi, rows) in slices.rows {
            let cols = self.params[pi].dims2().unwrap().1;
            for r in rows {
                for v in &mut self.params[pi].data_mut()[r * cols..(r + 1) * cols] {
                    *v = T::zero();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::small(2, 4, 16, 30, 12)
    }

    #[test]
    fn config_rejects_inconsistent_value_dim() {
        let mut c = cfg();
        c.d_v = 3;
        assert!(matches!(c.validate(), Err(Error::Config { ref field, .. }) if field == "d_v"));
        c = cfg();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let tasks = vec![
            ("a".to_string(), TaskKind::Classification { n_class: 3 }),
            ("b".to_string(), TaskKind::Regression),
        ];
        for c in [cfg(), ModelConfig { d_k: 3, d_ff: 7, ..ModelConfig::small(3, 2, 8, 11, 5) }] {
            let m = ModelState::<f32>::new(c.clone(), &tasks, 1).unwrap();
            assert_eq!(m.parameter_count(), c.parameter_count(&[3, 1]));
        }
    }

    #[test]
    fn gate_vector_validates_range() {
        assert!(HeadGateVector::new(1, 2, vec![0.0, 1.0]).is_ok());
        assert!(HeadGateVector::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(HeadGateVector::new(1, 2, vec![0.0]).is_err());
        let mut g = HeadGateVector::ones(2, 2);
        assert!(g.set(HeadId::new(2, 0), 0.0).is_err());
        assert!(g.set(HeadId::new(1, 1), -0.1).is_err());
    }

    #[test]
    fn head_slices_partition_attention_columns() {
        let m = ModelState::<f32>::new(cfg(), &[], 0).unwrap();
        let mut covered = [0usize; 16];
        for h in 0..4 {
            let s = m.head_slices(HeadId::new(1, h));
            for c in s.columns[0].1.clone() {
                covered[c] += 1;
            }
            assert_eq!(s.rows[0].1, h * 4..(h + 1) * 4);
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::<f32>::new(cfg(), &[], 3).unwrap();
        let b = ModelState::<f32>::new(cfg(), &[], 3).unwrap();
        let c = ModelState::<f32>::new(cfg(), &[], 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn duplicate_task_head_rejected() {
        let mut m = ModelState::<f32>::new(cfg(), &[], 0).unwrap();
        m.add_task_head("x", TaskKind::Regression, 0).unwrap();
        assert!(m.add_task_head("x", TaskKind::Regression, 0).is_err());
        assert!(m.task_index("y").is_err());
    }
}
