use super::forward::ForwardOptions;
use super::{HeadGateVector, ModelState};
use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};
use crate::tasks::{evaluate, Example, MetricKind, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub output: Vec<f64>,
    /// Argmax class for classification, the raw output for regression.
    pub value: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_one<T: Real>(
    model: &ModelState<T>,
    task: usize,
    ex: &Example,
    gates: Option<&HeadGateVector>,
) -> Result<Prediction> {
    let output = match gates {
        Some(g) => model.forward_gated(task, &ex.input, g)?,
        None => model.forward(task, &ex.input)?,
    };
    let value = match model.heads()[task].kind {
        TaskKind::Classification { .. } => argmax(&output) as f64,
        TaskKind::Regression => output[0],
    };
    Ok(Prediction { output, value })
}

/// Eval-mode predictions for every example, in order.
pub fn predict<T: Real>(
    model: &ModelState<T>,
    task: usize,
    examples: &[Example],
    gates: Option<&HeadGateVector>,
    exec: Exec,
) -> Result<Vec<f64>> {
    Ok(exec.try_map(examples, |_, ex| predict_one(model, task, ex, gates))?.into_iter().map(|p| p.value).collect())
}

/// Metric of task head `task` on `examples`.
pub fn score<T: Real>(
    model: &ModelState<T>,
    task: usize,
    examples: &[Example],
    metric: MetricKind,
    gates: Option<&HeadGateVector>,
    exec: Exec,
) -> Result<f64> {
    let preds = predict(model, task, examples, gates, exec)?;
    let golds: Vec<f64> = examples.iter().map(|e| e.label.as_f64()).collect();
    evaluate(&preds, &golds, metric)
}

/// Mean loss and mean parameter gradients over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T: Real = f32> {
    pub loss: f64,
    /// Per parameter; `None` for parameters outside the task's graph.
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Per-example gradients (possibly in parallel), summed in example order and
/// divided by the batch size. Dropout for example `i` is seeded from
/// `(dropout_seed, i)`.
pub fn batch_gradients<T: Real>(
    model: &ModelState<T>,
    task: usize,
    batch: &[Example],
    dropout_seed: Option<u64>,
    exec: Exec,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_example = exec.try_map(batch, |i, ex| -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let opts = ForwardOptions {
            train_params: true,
            dropout_seed: dropout_seed.map(|s| mix_seed(&[s, i as u64])),
            ..Default::default()
        };
        let mut g = model.graph(task, &ex.input, opts)?;
        let loss = g.loss(ex.label)?;
        let lv = g.tape.value(loss).data()[0].as_f64();
        let params = std::mem::take(&mut g.params);
        let mut grads = g.tape.backward(loss)?;
        let out = params
            .iter()
            .enumerate()
            .map(|(pi, p)| p.map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(model.params()[pi].shape()))))
            .collect();
        Ok((lv, out))
    })?;
    let n = batch.len();
    let mut iter = per_example.into_iter();
    let (mut loss, mut acc) = iter.next().unwrap();
    for (l, gs) in iter {
        loss += l;
        for (a, g) in acc.iter_mut().zip(gs) {
            if let (Some(a), Some(g)) = (a.as_mut(), g) {
                a.accumulate(&g);
            }
        }
    }
    let inv = T::lit(1.0 / n as f64);
    for t in acc.iter_mut().flatten() {
        for v in t.data_mut() {
            *v = *v * inv;
        }
    }
    Ok(BatchGradients { loss: loss / n as f64, grads: acc })
}
