//! Head importance scores and head-subset selection.
//!
//! The score of head `h` for a task is the mean over training samples of
//! `|∂L/∂ξ_h|`, taken at `ξ = 1`.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ForwardOptions, Gates, HeadId, ModelState};
use crate::tasks::{Example, TaskData};

fn default_max_batches() -> usize {
    100
}

fn default_batch_size() -> usize {
    32
}

fn default_loss_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceOptions {
    /// Upper bound on batches scored; one pass over the data if it is shorter.
    #[serde(default = "default_max_batches")]
    pub max_batches: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Divide each layer's scores by their ℓ2 norm.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_loss_scale")]
    pub loss_scale: f64,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        Self { max_batches: 100, batch_size: 32, normalize: false, loss_scale: 1.0 }
    }
}

/// Scores for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub task: String,
    /// Layer-major, one entry per head.
    pub scores: Vec<f64>,
    pub n_batches: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub n_layers: usize,
    pub n_heads: usize,
    pub normalized: bool,
    pub rows: Vec<ImportanceRow>,
}

/// Per-sample `|∂L/∂ξ_h|` for every head, at `ξ = 1`.
pub fn sample_sensitivity<T: Real>(model: &ModelState<T>, task: usize, ex: &Example, loss_scale: f64) -> Result<Vec<f64>> {
    let opts = ForwardOptions { gates: Some(Gates::Leaves), ..Default::default() };
    let mut g = model.graph(task, &ex.input, opts)?;
    let loss = g.loss(ex.label)?;
    let loss = if loss_scale == 1.0 { loss } else { g.tape.scale(loss, T::lit(loss_scale)) };
    let gates = std::mem::take(&mut g.gates);
    let grads = g.tape.backward(loss)?;
    Ok(gates.iter().map(|&v| grads.get(v).map_or(0.0, |t| t.data()[0].as_f64().abs())).collect())
}

/// Importance row of task head `task` over the leading batches of `train`.
pub fn head_importance<T: Real>(
    model: &ModelState<T>,
    task: usize,
    train: &[Example],
    opts: &ImportanceOptions,
    exec: Exec,
) -> Result<ImportanceRow> {
    if train.is_empty() {
        return Err(Error::invalid("importance needs at least one training sample"));
    }
    if opts.max_batches == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("importance needs max_batches >= 1 and batch_size >= 1"));
    }
    if opts.loss_scale.is_nan() || opts.loss_scale <= 0.0 {
        return Err(Error::invalid("loss_scale must be > 0"));
    }
    if model.gates.values().iter().any(|&g| g != 1.0) {
        return Err(Error::invalid("importance is defined at all gates = 1"));
    }
    let n = train.len().min(opts.max_batches.saturating_mul(opts.batch_size));
    let per_sample = exec.try_map(&train[..n], |_, ex| sample_sensitivity(model, task, ex, opts.loss_scale))?;
    let mut sums = vec![0.0; model.config.total_heads()];
    for s in &per_sample {
        for (a, b) in sums.iter_mut().zip(s) {
            *a += b;
        }
    }
    let mut scores: Vec<f64> = sums.into_iter().map(|s| s / n as f64).collect();
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("gate of head {}", HeadId::from_flat(bad, model.config.n_heads))));
    }
    if opts.normalize {
        normalize_layers(&mut scores, model.config.n_heads);
    }
    Ok(ImportanceRow {
        task: model.heads()[task].name.clone(),
        scores,
        n_batches: n.div_ceil(opts.batch_size),
        n_samples: n,
    })
}

/// Importance rows for every task, in task order.
pub fn importance_matrix<T: Real>(
    model: &ModelState<T>,
    tasks: &[TaskData],
    opts: &ImportanceOptions,
    exec: Exec,
) -> Result<ImportanceMatrix> {
    let rows = tasks
        .iter()
        .map(|t| head_importance(model, model.task_index(&t.spec.name)?, &t.train, opts, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceMatrix { n_layers: model.config.n_layers, n_heads: model.config.n_heads, normalized: opts.normalize, rows })
}

/// Divides each layer's scores by their ℓ2 norm (layers of zeros stay zero).
pub fn normalize_layers(scores: &mut [f64], n_heads: usize) {
    for layer in scores.chunks_mut(n_heads) {
        let norm = layer.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in layer {
                *x /= norm;
            }
        }
    }
}

/// `floor(x + 0.5)`, tolerant of representation error just below a half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Number of heads selected at fraction `alpha` of `total`.
pub fn head_count(alpha: f64, total: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(round_half_up(alpha * total as f64).clamp(1, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Top,
    Bottom,
    Random,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "random" => Ok(Self::Random),
            _ => Err(Error::invalid(format!("unknown selection mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub task: String,
    pub mode: SelectionMode,
    pub alpha: f64,
    /// Ranked order for top/bottom, ascending for random.
    pub members: Vec<HeadId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl HeadSet {
    pub fn contains(&self, h: HeadId) -> bool {
        self.members.contains(&h)
    }

    /// 0/1 vector over all heads, layer-major.
    pub fn indicator(&self, n_layers: usize, n_heads: usize) -> Vec<bool> {
        let mut v = vec![false; n_layers * n_heads];
        for h in &self.members {
            v[h.flat(n_heads)] = true;
        }
        v
    }
}

/// Picks `round_half_up(alpha · heads)` heads from a score row. Ties are
/// broken by layer, then head, ascending.
pub fn select_heads(
    row: &ImportanceRow,
    n_heads: usize,
    alpha: f64,
    mode: SelectionMode,
    seed: Option<u64>,
) -> Result<HeadSet> {
    let total = row.scores.len();
    if total == 0 || n_heads == 0 || !total.is_multiple_of(n_heads) {
        return Err(Error::invalid("score row does not cover whole layers"));
    }
    if row.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("score row contains non-finite values"));
    }
    let k = head_count(alpha, total)?;
    let mut idx: Vec<usize> = (0..total).collect();
    let members: Vec<HeadId> = match mode {
        SelectionMode::Top | SelectionMode::Bottom => {
            idx.sort_by(|&a, &b| {
                let by_score = row.scores[a].total_cmp(&row.scores[b]);
                let by_score = if mode == SelectionMode::Top { by_score.reverse() } else { by_score };
                by_score.then(a.cmp(&b))
            });
            idx[..k].iter().map(|&i| HeadId::from_flat(i, n_heads)).collect()
        }
        SelectionMode::Random => {
            let s = seed.ok_or_else(|| Error::invalid("random selection needs a seed"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut picked = sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| HeadId::from_flat(i, n_heads)).collect()
        }
    };
    Ok(HeadSet {
        task: row.task.clone(),
        mode,
        alpha,
        members,
        seed: if mode == SelectionMode::Random { seed } else { None },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub tasks: Vec<String>,
    /// `counts[task][layer]`.
    pub counts: Vec<Vec<usize>>,
    pub mean: Vec<f64>,
    /// Population standard deviation across tasks, per layer.
    pub std: Vec<f64>,
}

pub fn layer_distribution(sets: &[HeadSet], n_layers: usize) -> Result<LayerDistribution> {
    if sets.is_empty() {
        return Err(Error::invalid("layer distribution needs at least one head set"));
    }
    let mut counts = Vec::with_capacity(sets.len());
    for s in sets {
        let mut c = vec![0usize; n_layers];
        for h in &s.members {
            *c.get_mut(h.layer).ok_or_else(|| Error::invalid(format!("head {h} beyond {n_layers} layers")))? += 1;
        }
        counts.push(c);
    }
    let t = sets.len() as f64;
    let mean: Vec<f64> = (0..n_layers).map(|l| counts.iter().map(|c| c[l] as f64).sum::<f64>() / t).collect();
    let std = (0..n_layers)
        .map(|l| (counts.iter().map(|c| (c[l] as f64 - mean[l]).powi(2)).sum::<f64>() / t).sqrt())
        .collect();
    Ok(LayerDistribution { tasks: sets.iter().map(|s| s.task.clone()).collect(), counts, mean, std })
}

/// `100 · |A ∩ B| / |A|` for equally sized sets.
pub fn head_overlap(a: &HeadSet, b: &HeadSet) -> Result<f64> {
    overlap_percent(&a.members, &b.members)
}

pub fn overlap_percent(a: &[HeadId], b: &[HeadId]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("overlap needs equal non-empty sets, got {} and {}", a.len(), b.len())));
    }
    let sb: HashSet<&HeadId> = b.iter().collect();
    let common = a.iter().filter(|h| sb.contains(h)).count();
    Ok(100.0 * common as f64 / a.len() as f64)
}

/// Pairwise overlap matrix in set order.
pub fn overlap_matrix(sets: &[HeadSet]) -> Result<Vec<Vec<f64>>> {
    sets.iter().map(|a| sets.iter().map(|b| head_overlap(a, b)).collect()).collect()
}

/// Formats with `digits` significant digits, in plain or exponent form.
pub fn sig_digits(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.prec$e}", prec = digits - 1)
    }
}

impl ImportanceMatrix {
    pub fn row(&self, task: &str) -> Result<&ImportanceRow> {
        self.rows.iter().find(|r| r.task == task).ok_or_else(|| Error::UnknownTask(task.into()))
    }

    /// `task,layer,head,score,n_samples` with scores at 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,layer,head,score,n_samples\n");
        for r in &self.rows {
            for (i, s) in r.scores.iter().enumerate() {
                let h = HeadId::from_flat(i, self.n_heads);
                writeln!(out, "{},{},{},{},{}", r.task, h.layer, h.head, sig_digits(*s, 9), r.n_samples).unwrap();
            }
        }
        out
    }

    pub fn from_csv(content: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(content.as_bytes());
        let mut rows: Vec<ImportanceRow> = Vec::new();
        let mut cells: Vec<Vec<(usize, usize, f64)>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_err = |m: String| Error::Parse { path: "importance csv".into(), line: rec.position().map_or(0, |p| p.line() as usize), message: m };
            if rec.len() != 5 {
                return Err(parse_err(format!("expected 5 fields, got {}", rec.len())));
            }
            let num = |i: usize| rec[i].trim().parse::<usize>().map_err(|e| parse_err(e.to_string()));
            let (layer, head, n_samples) = (num(1)?, num(2)?, num(4)?);
            let score: f64 = rec[3].trim().parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?;
            let task = rec[0].to_string();
            let pos = match rows.iter().position(|r| r.task == task) {
                Some(p) => p,
                None => {
                    rows.push(ImportanceRow { task, scores: Vec::new(), n_batches: 0, n_samples });
                    cells.push(Vec::new());
                    rows.len() - 1
                }
            };
            cells[pos].push((layer, head, score));
        }
        let first = cells.first().ok_or_else(|| Error::invalid("importance csv has no rows"))?;
        let n_layers = first.iter().map(|c| c.0).max().unwrap() + 1;
        let n_heads = first.iter().map(|c| c.1).max().unwrap() + 1;
        for (row, cs) in rows.iter_mut().zip(cells) {
            if cs.len() != n_layers * n_heads {
                return Err(Error::invalid(format!("task `{}` has {} cells, expected {}", row.task, cs.len(), n_layers * n_heads)));
            }
            row.scores = vec![f64::NAN; n_layers * n_heads];
            for (l, h, s) in cs {
                if l >= n_layers || h >= n_heads {
                    return Err(Error::invalid(format!("cell L{l}H{h} out of range")));
                }
                row.scores[HeadId::new(l, h).flat(n_heads)] = s;
            }
            if row.scores.iter().any(|s| s.is_nan()) {
                return Err(Error::invalid(format!("task `{}` has duplicate cells", row.task)));
            }
        }
        Ok(Self { n_layers, n_heads, normalized: false, rows })
    }
}
