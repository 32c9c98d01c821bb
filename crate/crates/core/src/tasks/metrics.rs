//! Evaluation metrics: accuracy, binary F1, Matthews correlation, Spearman.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    F1,
    Matthews,
    Spearman,
}

/// Scores `predictions` against `golds`. Class predictions are passed as
/// class indices in `f64`; F1 and Matthews treat class 1 as positive.
pub fn evaluate(predictions: &[f64], golds: &[f64], metric: MetricKind) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    Ok(match metric {
        MetricKind::Accuracy => accuracy(predictions, golds),
        MetricKind::F1 => Confusion::from_binary(predictions, golds).f1(),
        MetricKind::Matthews => Confusion::from_binary(predictions, golds).matthews(),
        MetricKind::Spearman => spearman(predictions, golds).unwrap_or(0.0),
    })
}

pub fn accuracy(predictions: &[f64], golds: &[f64]) -> f64 {
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_binary(predictions: &[f64], golds: &[f64]) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in predictions.iter().zip(golds) {
            match (p == 1.0, g == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Harmonic mean of precision and recall; 0 when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Defined as 0 when any marginal is empty.
    pub fn matthews(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            0.0
        } else {
            ((tp * tn - fp * fn_) / denom.sqrt()).clamp(-1.0, 1.0)
        }
    }
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson of average-rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let g = [0., 1., 1., 0., 1.];
        for m in [MetricKind::Accuracy, MetricKind::F1, MetricKind::Matthews] {
            assert_eq!(evaluate(&g, &g, m).unwrap(), 1.0, "{m:?}");
        }
        let r = [0.1, 0.5, 0.2, 0.9];
        assert!((evaluate(&r, &r, MetricKind::Spearman).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_confusion() {
        // TP, FP, FN, TN = 1 each: Mcc = 0/sqrt(16) = 0, F1 = 2/(2+1+1) = 0.5
        let preds = [1., 1., 0., 0.];
        let golds = [1., 0., 1., 0.];
        assert_eq!(evaluate(&preds, &golds, MetricKind::Matthews).unwrap(), 0.0);
        assert_eq!(evaluate(&preds, &golds, MetricKind::F1).unwrap(), 0.5);
    }

    #[test]
    fn inverted_ranks() {
        let r = evaluate(&[3., 2., 1.], &[1., 2., 3.], MetricKind::Spearman).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_zero_when_marginal_empty() {
        assert_eq!(evaluate(&[1., 1., 1.], &[1., 0., 1.], MetricKind::Matthews).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(evaluate(&[1.], &[1., 0.], MetricKind::Accuracy).is_err());
        assert!(evaluate(&[], &[], MetricKind::Accuracy).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[10., 20., 10., 30.]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    fn joint_shuffle(p: &[f64], g: &[f64], seed: u64) -> (Vec<f64>, Vec<f64>) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        (idx.iter().map(|&i| p[i]).collect(), idx.iter().map(|&i| g[i]).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metric_ranges(
            pairs in proptest::collection::vec((0u8..2, 0u8..2, -5.0f64..5.0, -5.0f64..5.0), 1..40)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0 as f64).collect();
            let g: Vec<f64> = pairs.iter().map(|x| x.1 as f64).collect();
            let rp: Vec<f64> = pairs.iter().map(|x| x.2).collect();
            let rg: Vec<f64> = pairs.iter().map(|x| x.3).collect();
            let mcc = evaluate(&p, &g, MetricKind::Matthews).unwrap();
            let f1 = evaluate(&p, &g, MetricKind::F1).unwrap();
            let rho = evaluate(&rp, &rg, MetricKind::Spearman).unwrap();
            prop_assert!((-1.0..=1.0).contains(&mcc));
            prop_assert!((0.0..=1.0).contains(&f1));
            prop_assert!((-1.0..=1.0).contains(&rho));
        }

        #[test]
        fn metrics_permutation_invariant(
            pairs in proptest::collection::vec((0u8..2, 0u8..2, -5.0f64..5.0, -5.0f64..5.0), 2..30),
            seed in any::<u64>()
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0 as f64).collect();
            let g: Vec<f64> = pairs.iter().map(|x| x.1 as f64).collect();
            let (sp, sg) = joint_shuffle(&p, &g, seed);
            for m in [MetricKind::Accuracy, MetricKind::F1, MetricKind::Matthews] {
                prop_assert_eq!(evaluate(&p, &g, m).unwrap(), evaluate(&sp, &sg, m).unwrap());
            }
            let rp: Vec<f64> = pairs.iter().map(|x| x.2).collect();
            let rg: Vec<f64> = pairs.iter().map(|x| x.3).collect();
            let (srp, srg) = joint_shuffle(&rp, &rg, seed);
            let a = evaluate(&rp, &rg, MetricKind::Spearman).unwrap();
            let b = evaluate(&srp, &srg, MetricKind::Spearman).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
