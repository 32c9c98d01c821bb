//! Same/different-class pair construction from a single-sentence corpus.
//!
//! Every input sample gets two "stubs". Most samples spend one stub on a
//! same-class partner and one on a different-class partner, so each sample is
//! used exactly twice and half the pairs are Same. Classes with an odd count
//! cannot pair all their same-class stubs; they are balanced against each
//! other by giving one sample two same-class partners in half of them and two
//! different-class partners in the other half.
//!
//! Different-class stubs are laid out class by class and stub `i` is matched
//! with stub `i + M/2`. This never matches two stubs of one class as long as
//! no class holds more than half the stubs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledExample};
use crate::error::{Error, Result};

pub const PAIR_DIFFERENT: usize = 0;
pub const PAIR_SAME: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub n_inputs: usize,
    pub n_pairs: usize,
    pub same: usize,
    pub different: usize,
    /// Samples whose usage count is not exactly two.
    pub usage_violations: usize,
    /// Pairs that join a sample with itself.
    pub self_pairs: usize,
    pub construction: String,
}

/// Builds `N` labeled pairs from `N` single-sentence classification samples.
/// Label [`PAIR_SAME`] when both come from the same class.
pub fn make_pair_dataset(inputs: &[LabeledExample], seed: u64) -> Result<(Vec<LabeledExample>, PairStats)> {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, ex) in inputs.iter().enumerate() {
        let Label::Class(c) = ex.label else {
            return Err(Error::invalid("pair construction needs class labels"));
        };
        if ex.text_b.is_some() {
            return Err(Error::invalid("pair construction needs single-sentence inputs"));
        }
        if by_class.len() <= c {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(i);
    }
    by_class.retain(|g| !g.is_empty());
    if by_class.len() < 2 {
        return Err(Error::invalid("pair construction needs at least two classes"));
    }
    if by_class.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("pair construction needs at least two samples per class"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut by_class {
        g.shuffle(&mut rng);
    }

    // Odd classes alternate between donating an extra same-class stub (+1)
    // and an extra different-class stub (-1). Singletons cannot donate.
    let mut odd: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() % 2 == 1).collect();
    odd.shuffle(&mut rng);
    let mut plus = vec![false; by_class.len()];
    let mut n_plus = 0;
    for &c in &odd {
        if n_plus < odd.len() / 2 && by_class[c].len() >= 3 {
            plus[c] = true;
            n_plus += 1;
        }
    }

    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(inputs.len());
    let mut diff_stubs: Vec<Vec<usize>> = vec![Vec::new(); by_class.len()];
    for (c, g) in by_class.iter().enumerate() {
        let mut same: Vec<usize> = g.clone();
        let mut diff: Vec<usize> = g.clone();
        if g.len() % 2 == 1 {
            if plus[c] {
                // g[0] is partnered twice inside its class and never across.
                diff.retain(|&x| x != g[0]);
                same.insert(2, g[0]);
            } else {
                diff.push(*same.last().unwrap());
                same.pop();
            }
        }
        for w in same.chunks_exact(2) {
            edges.push((w[0], w[1]));
        }
        diff.shuffle(&mut rng);
        diff_stubs[c] = diff;
    }

    let mut class_order: Vec<usize> = (0..by_class.len()).collect();
    class_order.shuffle(&mut rng);
    let flat: Vec<usize> = class_order.iter().flat_map(|&c| diff_stubs[c].iter().copied()).collect();
    let half = flat.len() / 2;
    for i in 0..half {
        edges.push((flat[i], flat[i + half]));
    }

    edges.shuffle(&mut rng);
    let class_of = |i: usize| match inputs[i].label {
        Label::Class(c) => c,
        Label::Value(_) => unreachable!(),
    };
    let mut usage = vec![0usize; inputs.len()];
    let mut stats = PairStats {
        n_inputs: inputs.len(),
        n_pairs: 0,
        same: 0,
        different: 0,
        usage_violations: 0,
        self_pairs: 0,
        construction: "stub matching: one same-class and one different-class partner per sample".into(),
    };
    let mut pairs = Vec::with_capacity(edges.len());
    for (a, b) in edges {
        let (a, b) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        usage[a] += 1;
        usage[b] += 1;
        if a == b {
            stats.self_pairs += 1;
        }
        let same = class_of(a) == class_of(b);
        if same {
            stats.same += 1;
        } else {
            stats.different += 1;
        }
        pairs.push(LabeledExample {
            text_a: inputs[a].text_a.clone(),
            text_b: Some(inputs[b].text_a.clone()),
            label: Label::Class(if same { PAIR_SAME } else { PAIR_DIFFERENT }),
        });
    }
    stats.n_pairs = pairs.len();
    stats.usage_violations = usage.iter().filter(|&&u| u != 2).count();
    Ok((pairs, stats))
}
