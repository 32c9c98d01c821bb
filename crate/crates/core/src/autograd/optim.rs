//! Adam with bias correction and a linear warm-up learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    /// Hold the base rate after warm-up.
    #[default]
    Constant,
    /// Decay linearly from the base rate to zero at the last planned step.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_proportion: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub decay: LrDecay,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, total_steps: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_proportion: 0.1,
            total_steps,
            decay: LrDecay::Constant,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_proportion * self.total_steps as f64).ceil() as usize
    }

    /// Effective learning rate at zero-based global step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.learning_rate * (step + 1) as f64 / w as f64;
        }
        match self.decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::LinearDecay => {
                let span = self.total_steps.saturating_sub(w).max(1) as f64;
                let left = self.total_steps.saturating_sub(step) as f64;
                (self.learning_rate * left / span).max(0.0)
            }
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates this tensor has received (bias-correction exponent).
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: usize,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let moments = params
            .into_iter()
            .map(|p| Moments { m: vec![T::zero(); p.numel()], v: vec![T::zero(); p.numel()], t: 0 })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn from_parts(config: AdamConfig, step: usize, moments: Vec<Moments<T>>) -> Self {
        Self { config, step, moments }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Registers a new parameter tensor (e.g. a freshly added task head).
    pub fn push_param(&mut self, p: &Tensor<T>) {
        self.moments.push(Moments { m: vec![T::zero(); p.numel()], v: vec![T::zero(); p.numel()], t: 0 });
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Applies one update and returns the learning rate used.
    ///
    /// Tensors whose gradient is `None` are skipped entirely. `trainable`,
    /// when given for a tensor, selects the elements that may change; the
    /// others keep their value and their moments untouched.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        names: &[String],
        grads: &[Option<Tensor<T>>],
        trainable: &[Option<Vec<bool>>],
    ) -> Result<f64> {
        if self.step >= self.config.total_steps {
            return Err(Error::StepBudgetExceeded { step: self.step, planned: self.config.total_steps });
        }
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| i.to_string())));
                }
            }
        }
        let lr = self.current_lr();
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let eps = T::lit(self.config.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let mask = trainable.get(i).and_then(|m| m.as_deref());
            let mo = &mut self.moments[i];
            mo.t += 1;
            let c1 = T::lit(1.0 - b1.powi(mo.t as i32));
            let c2 = T::lit(1.0 - b2.powi(mo.t as i32));
            let step_size = T::lit(lr);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if let Some(mask) = mask {
                    if !mask[j] {
                        continue;
                    }
                }
                let m = tb1 * mo.m[j] + ob1 * gv;
                let v = tb2 * mo.v[j] + ob2 * gv * gv;
                mo.m[j] = m;
                mo.v[j] = v;
                let mhat = m / c1;
                let vhat = v / c2;
                *pv = *pv - step_size * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
