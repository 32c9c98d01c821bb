//! Desk-scale synthetic tasks with deterministic labeling rules.
//!
//! Every generator draws words from small closed vocabularies so that the
//! label is a function of the input:
//!
//! * `topic`: single sentence of 6-10 words; every content word comes from
//!   the six topic words of its class, mixed with shared filler words. The
//!   class is the topic the content words belong to.
//! * `marker-parity`: single sentence of 8 filler words in which one or two
//!   positions carry the marker `mk`. Label 1 iff the marker count is odd.
//! * `pair-equality`: two sentences of 4-7 filler words. Label 1 iff B == A;
//!   negatives draw B independently and reject exact copies.
//! * `pair-containment`: A has 6-9 filler words and B has two. Label 1 iff B
//!   is a contiguous span of A; negatives use words absent from A.
//! * `length-ratio`: two sentences of 1-10 filler words; regression target
//!   `len(A) / (len(A) + len(B))`.
//!
//! Classification labels are assigned round-robin before shuffling, so class
//! counts differ by at most one.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabeledExample, MetricKind, Paradigm, TaskKind, TaskSpec};
use crate::error::{Error, Result};

const N_FILLER: usize = 24;
const TOPIC_WORDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SynthKind {
    Topic { n_class: usize },
    MarkerParity,
    PairEquality,
    PairContainment,
    LengthRatio,
}

impl SynthKind {
    pub fn task_kind(self) -> TaskKind {
        match self {
            SynthKind::Topic { n_class } => TaskKind::Classification { n_class },
            SynthKind::LengthRatio => TaskKind::Regression,
            _ => TaskKind::Classification { n_class: 2 },
        }
    }

    pub fn paradigm(self) -> Paradigm {
        match self {
            SynthKind::Topic { .. } | SynthKind::MarkerParity => Paradigm::SingleSentence,
            _ => Paradigm::SentencePair,
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            SynthKind::LengthRatio => MetricKind::Spearman,
            _ => MetricKind::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub size: usize,
    pub seed: u64,
}

fn filler(i: usize) -> String {
    format!("f{i}")
}

fn random_fillers(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| filler(rng.random_range(0..N_FILLER))).collect()
}

/// Generates `size` examples of `kind` under `seed`, with a task named `name`.
pub fn synth_task(name: &str, kind: SynthKind, size: usize, seed: u64) -> Result<(TaskSpec, Vec<LabeledExample>)> {
    let spec = TaskSpec::new(name, kind.paradigm(), kind.task_kind(), kind.metric())?;
    let n_class = kind.task_kind().output_width().max(2);
    if size < 2 * n_class {
        return Err(Error::invalid(format!("synthetic size {size} below 2 x {n_class} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let class = i % n_class;
        let ex = match kind {
            SynthKind::Topic { n_class } => topic(&mut rng, class, n_class),
            SynthKind::MarkerParity => marker_parity(&mut rng, class),
            SynthKind::PairEquality => pair_equality(&mut rng, class),
            SynthKind::PairContainment => pair_containment(&mut rng, class),
            SynthKind::LengthRatio => length_ratio(&mut rng),
        };
        out.push(ex);
    }
    out.shuffle(&mut rng);
    Ok((spec, out))
}

fn topic(rng: &mut ChaCha8Rng, class: usize, _n_class: usize) -> LabeledExample {
    let len = rng.random_range(6..=10);
    let mut words = random_fillers(rng, len);
    let n_topic = rng.random_range(2..=len / 2);
    let mut pos: Vec<usize> = (0..len).collect();
    pos.shuffle(rng);
    for &p in &pos[..n_topic] {
        words[p] = format!("t{class}w{}", rng.random_range(0..TOPIC_WORDS));
    }
    LabeledExample { text_a: words.join(" "), text_b: None, label: Label::Class(class) }
}

fn marker_parity(rng: &mut ChaCha8Rng, class: usize) -> LabeledExample {
    let mut words = random_fillers(rng, 8);
    let count = if class == 1 { 1 } else { 2 };
    let mut pos: Vec<usize> = (0..8).collect();
    pos.shuffle(rng);
    for &p in &pos[..count] {
        words[p] = "mk".into();
    }
    LabeledExample { text_a: words.join(" "), text_b: None, label: Label::Class(count % 2) }
}

fn pair_equality(rng: &mut ChaCha8Rng, class: usize) -> LabeledExample {
    let la = rng.random_range(4..=7);
    let a = random_fillers(rng, la);
    let b = if class == 1 {
        a.clone()
    } else {
        loop {
            let lb = rng.random_range(4..=7);
            let b = random_fillers(rng, lb);
            if b != a {
                break b;
            }
        }
    };
    LabeledExample { text_a: a.join(" "), text_b: Some(b.join(" ")), label: Label::Class(class) }
}

fn pair_containment(rng: &mut ChaCha8Rng, class: usize) -> LabeledExample {
    let la = rng.random_range(6..=9);
    let a = random_fillers(rng, la);
    let b: Vec<String> = if class == 1 {
        let start = rng.random_range(0..la - 1);
        a[start..start + 2].to_vec()
    } else {
        let absent: Vec<String> = (0..N_FILLER).map(filler).filter(|w| !a.contains(w)).collect();
        (0..2).map(|_| absent.choose(rng).unwrap().clone()).collect()
    };
    LabeledExample { text_a: a.join(" "), text_b: Some(b.join(" ")), label: Label::Class(class) }
}

fn length_ratio(rng: &mut ChaCha8Rng) -> LabeledExample {
    let la = rng.random_range(1..=10);
    let lb = rng.random_range(1..=10);
    let a = random_fillers(rng, la);
    let b = random_fillers(rng, lb);
    LabeledExample {
        text_a: a.join(" "),
        text_b: Some(b.join(" ")),
        label: Label::Value(la as f64 / (la + lb) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [SynthKind; 5] = [
        SynthKind::Topic { n_class: 4 },
        SynthKind::MarkerParity,
        SynthKind::PairEquality,
        SynthKind::PairContainment,
        SynthKind::LengthRatio,
    ];

    #[test]
    fn reproducible_under_seed() {
        for k in KINDS {
            assert_eq!(synth_task("t", k, 50, 9).unwrap(), synth_task("t", k, 50, 9).unwrap());
            assert_ne!(synth_task("t", k, 50, 9).unwrap().1, synth_task("t", k, 50, 10).unwrap().1);
        }
    }

    #[test]
    fn labels_balanced_within_one() {
        for k in KINDS {
            let (spec, xs) = synth_task("t", k, 1000, 1).unwrap();
            if let TaskKind::Classification { n_class } = spec.kind {
                let counts: Vec<usize> =
                    (0..n_class).map(|c| xs.iter().filter(|x| x.label == Label::Class(c)).count()).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{k:?}: {counts:?}");
            }
            for x in &xs {
                x.check(&spec).unwrap();
            }
        }
    }

    #[test]
    fn labeling_rules_hold() {
        let (_, xs) = synth_task("eq", SynthKind::PairEquality, 400, 2).unwrap();
        for x in &xs {
            let same = Some(&x.text_a) == x.text_b.as_ref();
            assert_eq!(x.label, Label::Class(same as usize));
        }
        let (_, xs) = synth_task("mp", SynthKind::MarkerParity, 400, 2).unwrap();
        for x in &xs {
            let n = x.text_a.split(' ').filter(|w| *w == "mk").count();
            assert_eq!(x.label, Label::Class(n % 2));
        }
        let (_, xs) = synth_task("pc", SynthKind::PairContainment, 400, 2).unwrap();
        for x in &xs {
            let contained = format!(" {} ", x.text_a).contains(&format!(" {} ", x.text_b.as_ref().unwrap()));
            assert_eq!(x.label, Label::Class(contained as usize));
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(synth_task("t", SynthKind::Topic { n_class: 4 }, 7, 0).is_err());
        assert!(synth_task("t", SynthKind::MarkerParity, 3, 0).is_err());
    }
}
