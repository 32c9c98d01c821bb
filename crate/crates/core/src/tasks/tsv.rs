//! Tab-separated datasets: `label<TAB>text` or `label<TAB>textA<TAB>textB`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Label, LabeledExample, Paradigm, TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Parses TSV content. `origin` names the source in error messages.
pub fn parse_tsv(content: &str, spec: &TaskSpec, origin: &str) -> Result<Vec<LabeledExample>> {
    let want = match spec.paradigm {
        Paradigm::SingleSentence => 2,
        Paradigm::SentencePair => 3,
    };
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { path: origin.to_string(), line: line_no, message };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != want {
            return Err(err(format!("expected {want} tab-separated columns, found {}", cols.len())));
        }
        let label = match spec.kind {
            TaskKind::Classification { .. } => Label::Class(
                cols[0].trim().parse().map_err(|_| err(format!("class label `{}` is not an index", cols[0])))?,
            ),
            TaskKind::Regression => Label::Value(
                cols[0].trim().parse().map_err(|_| err(format!("label `{}` is not a decimal", cols[0])))?,
            ),
        };
        let ex = LabeledExample {
            text_a: cols[1].to_string(),
            text_b: (want == 3).then(|| cols[2].to_string()),
            label,
        };
        ex.check(spec).map_err(|e| err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a task. Without `dev_path` the training file is split by a seeded
/// shuffle with `train_ratio` going to train.
pub fn load_tsv(
    path: &Path,
    spec: &TaskSpec,
    dev_path: Option<&Path>,
    train_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    let train = parse_tsv(&read(path)?, spec, &path.display().to_string())?;
    match dev_path {
        Some(dp) => {
            let dev = parse_tsv(&read(dp)?, spec, &dp.display().to_string())?;
            Ok(Dataset { spec: spec.clone(), train, dev })
        }
        None => Dataset::split(spec.clone(), train, train_ratio, seed),
    }
}

fn label_text(label: Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        // shortest representation that parses back to the same value
        Label::Value(v) => format!("{v:?}"),
    }
}

pub fn write_tsv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        let clean = |t: &str| t.replace(['\t', '\n', '\r'], " ");
        write!(s, "{}\t{}", label_text(ex.label), clean(&ex.text_a)).unwrap();
        if let Some(b) = &ex.text_b {
            write!(s, "\t{}", clean(b)).unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::MetricKind;

    fn single() -> TaskSpec {
        TaskSpec::new("s", Paradigm::SingleSentence, TaskKind::Classification { n_class: 2 }, MetricKind::Accuracy)
            .unwrap()
    }

    fn pair() -> TaskSpec {
        TaskSpec::new("p", Paradigm::SentencePair, TaskKind::Classification { n_class: 2 }, MetricKind::Accuracy)
            .unwrap()
    }

    #[test]
    fn two_valid_lines() {
        let xs = parse_tsv("0\thello world\n1\tbye\n", &single(), "mem").unwrap();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1].label, Label::Class(1));
    }

    #[test]
    fn pair_mode_rejects_short_line_with_line_number() {
        let err = parse_tsv("1\ta\tb\n0\tonly one\n", &pair(), "data.tsv").unwrap_err();
        match err {
            Error::Parse { line, ref path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "data.tsv");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn regression_labels_parse_as_decimals() {
        let spec =
            TaskSpec::new("r", Paradigm::SentencePair, TaskKind::Regression, MetricKind::Spearman).unwrap();
        let xs = parse_tsv("0.25\ta\tb\n", &spec, "m").unwrap();
        assert_eq!(xs[0].label, Label::Value(0.25));
        assert!(parse_tsv("x\ta\tb\n", &spec, "m").is_err());
    }

    #[test]
    fn out_of_range_class_rejected() {
        assert!(parse_tsv("5\tword\n", &single(), "m").is_err());
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        let spec =
            TaskSpec::new("r", Paradigm::SentencePair, TaskKind::Regression, MetricKind::Spearman).unwrap();
        let xs = vec![
            LabeledExample { text_a: "a b".into(), text_b: Some("c".into()), label: Label::Value(0.1) },
            LabeledExample { text_a: "d".into(), text_b: Some("e f g".into()), label: Label::Value(1.0 / 3.0) },
        ];
        write_tsv(&p, &xs).unwrap();
        let back = parse_tsv(&std::fs::read_to_string(&p).unwrap(), &spec, "x").unwrap();
        assert_eq!(back, xs);
    }
}
