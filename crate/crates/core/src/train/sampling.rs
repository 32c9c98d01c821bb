use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::mix_seed;

/// Stream tags so that derived seeds never collide across purposes.
pub(crate) const STREAM_TASK: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Proportional,
    Annealed,
}

/// Task-draw probabilities `p_i ∝ N_i^ε` at one-based `epoch` of
/// `total_epochs`. `ε = 1` for proportional sampling and
/// `1 − 0.8 (e − 1) / (E − 1)` when annealed.
pub fn sampling_probs(sizes: &[usize], epoch: usize, total_epochs: usize, mode: SamplingMode) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("every task needs at least one training example"));
    }
    let eps = match mode {
        SamplingMode::Proportional => 1.0,
        SamplingMode::Annealed => {
            if total_epochs < 2 {
                return Err(Error::invalid("annealed sampling needs at least 2 epochs"));
            }
            if epoch == 0 || epoch > total_epochs {
                return Err(Error::invalid(format!("epoch {epoch} outside [1, {total_epochs}]")));
            }
            1.0 - 0.8 * (epoch - 1) as f64 / (total_epochs - 1) as f64
        }
    };
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(eps)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Task drawn at global `step`; depends only on `(seed, step, probs)`.
pub fn sample_task(probs: &[f64], seed: u64, step: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_TASK, step as u64]));
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Position in one task's endless, per-pass reshuffled example stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StreamState {
    pub pass: u64,
    pub pos: usize,
}

/// Example order of pass `pass` over `n` examples of task `task`.
pub(crate) fn pass_order(n: usize, seed: u64, task: usize, pass: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, STREAM_SHUFFLE, task as u64, pass]));
    order.shuffle(&mut rng);
    order
}

impl StreamState {
    /// Indices of the next `batch` examples, wrapping into a freshly shuffled
    /// pass when the current one runs out.
    pub fn next_batch(&mut self, n: usize, batch: usize, seed: u64, task: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        let mut order = pass_order(n, seed, task, self.pass);
        while out.len() < batch {
            if self.pos == n {
                self.pass += 1;
                self.pos = 0;
                order = pass_order(n, seed, task, self.pass);
            }
            let take = (batch - out.len()).min(n - self.pos);
            out.extend_from_slice(&order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_and_endpoints() {
        let p = sampling_probs(&[100, 400], 3, 5, SamplingMode::Proportional).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let a = sampling_probs(&[100, 400], 1, 5, SamplingMode::Annealed).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn annealed_last_epoch_matches_direct_evaluation() {
        let p = sampling_probs(&[100, 400], 5, 5, SamplingMode::Annealed).unwrap();
        let (a, b) = (100f64.powf(0.2), 400f64.powf(0.2));
        assert!((a - 2.51189).abs() < 1e-5 && (b - 3.31445).abs() < 1e-5);
        assert!((p[0] - a / (a + b)).abs() < 1e-12);
        assert!((p[0] - 0.43113).abs() < 1e-5);
        assert!((p[1] - 0.56887).abs() < 1e-5);
    }

    #[test]
    fn annealed_needs_two_epochs() {
        assert!(sampling_probs(&[1, 2], 1, 1, SamplingMode::Annealed).is_err());
        assert!(sampling_probs(&[1, 0], 1, 2, SamplingMode::Proportional).is_err());
    }

    #[test]
    fn stream_covers_each_pass_once() {
        let mut s = StreamState::default();
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.extend(s.next_batch(10, 5, 1, 0));
        }
        let mut first: Vec<usize> = seen[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(s, StreamState { pass: 1, pos: 10 });
        assert_ne!(seen[..10], seen[10..]);
    }

    #[test]
    fn batch_larger_than_dataset_wraps() {
        let mut s = StreamState::default();
        assert_eq!(s.next_batch(3, 7, 0, 0).len(), 7);
    }

    proptest::proptest! {
        #[test]
        fn probabilities_sum_to_one(sizes in proptest::collection::vec(1usize..100_000, 1..8), e_total in 2usize..30, e in 1usize..30) {
            let e = e.min(e_total);
            for mode in [SamplingMode::Proportional, SamplingMode::Annealed] {
                let p = sampling_probs(&sizes, e, e_total, mode).unwrap();
                proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
