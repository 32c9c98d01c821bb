//! Relative performance under head pruning and dissociation scores.
//!
//! `RP_i(H)` is task `i`'s metric with the heads `H` gated off, divided by
//! its unpruned metric. Task `i`'s dissociation score is the mean of
//! `RP_i(H_j)` over the other tasks `j` minus `RP_i(H_i)`. Scores are
//! reported in percent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};
use crate::importance::{
    importance_matrix, layer_distribution, overlap_matrix, select_heads, HeadSet, ImportanceMatrix, ImportanceOptions,
    ImportanceRow, LayerDistribution, SelectionMode,
};
use crate::model::{score, HeadGateVector, ModelState};
use crate::tasks::TaskData;

/// `pruned / base`; `None` when `base <= 0` or either value is not finite.
pub fn relative_performance(base: f64, pruned: f64) -> Option<f64> {
    (base > 0.0 && base.is_finite() && pruned.is_finite()).then(|| pruned / base)
}

/// Measured performances: `pruned[j][i]` is task `i` evaluated with the
/// heads selected for task `j` pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfTable {
    pub tasks: Vec<String>,
    pub base: Vec<f64>,
    pub pruned: Vec<Vec<f64>>,
    /// Additional labeled rows (e.g. a random-head baseline), not used by the
    /// scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_rows: Vec<(String, Vec<f64>)>,
}

impl PerfTable {
    pub fn new(tasks: Vec<String>, base: Vec<f64>, pruned: Vec<Vec<f64>>) -> Result<Self> {
        let n = tasks.len();
        if n < 2 {
            return Err(Error::invalid("dissociation needs at least two tasks"));
        }
        if base.len() != n || pruned.len() != n || pruned.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(format!("performance table must be {n} x {n} plus a base row")));
        }
        Ok(Self { tasks, base, pruned, extra_rows: Vec::new() })
    }

    /// `rp[j][i] = RP_i(H_j)`.
    pub fn rp_matrix(&self) -> Vec<Vec<Option<f64>>> {
        self.pruned
            .iter()
            .map(|row| row.iter().zip(&self.base).map(|(&p, &b)| relative_performance(b, p)).collect())
            .collect()
    }

    /// Table-3-shaped CSV: one row per pruned-for task, then `base` and
    /// `D_i`, with evaluated tasks as columns. Percent values at 2 decimals.
    pub fn to_csv(&self, scores: Option<&MultiDissociation>) -> String {
        let mut out = String::from("pruned_for_task");
        for t in &self.tasks {
            write!(out, ",{t}").unwrap();
        }
        out.push('\n');
        let mut line = |label: &str, vals: &mut dyn Iterator<Item = Option<f64>>| {
            out.push_str(label);
            for v in vals {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&percent2(v));
                }
            }
            out.push('\n');
        };
        for (t, row) in self.tasks.iter().zip(&self.pruned) {
            line(t, &mut row.iter().map(|&v| Some(v)));
        }
        for (label, row) in &self.extra_rows {
            line(label, &mut row.iter().map(|&v| Some(v)));
        }
        line("base", &mut self.base.iter().map(|&v| Some(v)));
        if let Some(s) = scores {
            line("D_i", &mut s.per_task.iter().copied());
        }
        out
    }

    /// Parses the layout written by [`to_csv`](Self::to_csv). A `D_i` row is
    /// ignored; unknown row labels become extra rows.
    pub fn from_csv(content: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(content.as_bytes());
        let header = rdr.headers()?.clone();
        if header.get(0).map(str::trim) != Some("pruned_for_task") {
            return Err(Error::Parse {
                path: "performance csv".into(),
                line: 1,
                message: "first header cell must be `pruned_for_task`".into(),
            });
        }
        let tasks: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let n = tasks.len();
        let mut pruned: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut base = None;
        let mut extra_rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let label = rec[0].trim().to_string();
            if label == "D_i" {
                continue;
            }
            let vals = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: "performance csv".into(),
                        line,
                        message: format!("`{c}`: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if label == "base" {
                base = Some(vals);
            } else if let Some(j) = tasks.iter().position(|t| *t == label) {
                if pruned[j].replace(vals).is_some() {
                    return Err(Error::Parse { path: "performance csv".into(), line, message: format!("duplicate row `{label}`") });
                }
            } else {
                extra_rows.push((label, vals));
            }
        }
        let base = base.ok_or_else(|| Error::invalid("performance csv lacks a `base` row"))?;
        let pruned = pruned
            .into_iter()
            .enumerate()
            .map(|(j, r)| r.ok_or_else(|| Error::invalid(format!("performance csv lacks the row for `{}`", tasks[j]))))
            .collect::<Result<Vec<_>>>()?;
        let mut t = Self::new(tasks, base, pruned)?;
        t.extra_rows = extra_rows;
        Ok(t)
    }
}

/// Half-up rounding to two decimals (away from zero for negatives).
pub fn percent2(x: f64) -> String {
    let r = (x.abs() * 100.0 + 0.5 + 1e-7).floor() / 100.0;
    let r = if x < 0.0 && r != 0.0 { -r } else { r };
    format!("{r:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDissociation {
    /// Percent; `None` where an RP cell for that task is undefined.
    pub per_task: Vec<Option<f64>>,
    /// Mean of `per_task`; `None` unless every entry is available.
    pub average: Option<f64>,
    /// `(pruned_for, evaluated)` cells with undefined RP.
    pub excluded: Vec<(usize, usize)>,
}

pub fn multi_dissociation(table: &PerfTable) -> MultiDissociation {
    let rp = table.rp_matrix();
    let n = table.tasks.len();
    let mut excluded = Vec::new();
    let mut per_task = Vec::with_capacity(n);
    for i in 0..n {
        let col: Vec<Option<f64>> = (0..n).map(|j| rp[j][i]).collect();
        for (j, c) in col.iter().enumerate() {
            if c.is_none() {
                excluded.push((j, i));
            }
        }
        let d = match col.iter().copied().collect::<Option<Vec<f64>>>() {
            Some(c) => {
                let others: f64 = (0..n).filter(|&j| j != i).map(|j| c[j]).sum::<f64>() / (n - 1) as f64;
                Some(100.0 * (others - c[i]))
            }
            None => None,
        };
        per_task.push(d);
    }
    let average = per_task.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n as f64);
    MultiDissociation { per_task, average, excluded }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualDissociation {
    pub d_a: f64,
    pub d_b: f64,
    pub d: f64,
}

/// Two-task dissociation from the four pruned evaluations, in percent.
/// `a_under_b` is task A's metric with task B's heads pruned.
pub fn dual_dissociation(
    base_a: f64,
    base_b: f64,
    a_under_a: f64,
    a_under_b: f64,
    b_under_a: f64,
    b_under_b: f64,
) -> Result<DualDissociation> {
    let rp = |b, p| relative_performance(b, p).ok_or_else(|| Error::invalid(format!("relative performance undefined for base {b}")));
    let d_a = 100.0 * (rp(base_a, a_under_b)? - rp(base_a, a_under_a)?);
    let d_b = 100.0 * (rp(base_b, b_under_a)? - rp(base_b, b_under_b)?);
    Ok(DualDissociation { d_a, d_b, d: (d_a + d_b) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub distinct: f64,
    pub mild: f64,
    pub single: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { distinct: 10.0, mild: 5.0, single: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DissociationLabel {
    Double,
    Single,
    None,
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecializationLevel {
    Distinct,
    Mild,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: DissociationLabel,
    pub level: SpecializationLevel,
    /// Sign of each `D_i` (-1, 0, 1).
    pub signs: Vec<i8>,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Two tasks: double when both scores are positive, single when one exceeds
/// the single threshold and the other is negative, inconsistent when both are
/// negative. Level is distinct (mild) for a double dissociation with average
/// at least the distinct (above the mild) threshold.
pub fn classify_dual(d_a: f64, d_b: f64, th: &Thresholds) -> Result<Classification> {
    if !d_a.is_finite() || !d_b.is_finite() {
        return Err(Error::invalid("classification needs finite scores"));
    }
    let d = (d_a + d_b) / 2.0;
    let label = if d_a > 0.0 && d_b > 0.0 {
        DissociationLabel::Double
    } else if (d_a > th.single && d_b < 0.0) || (d_b > th.single && d_a < 0.0) {
        DissociationLabel::Single
    } else if d_a < 0.0 && d_b < 0.0 {
        DissociationLabel::Inconsistent
    } else {
        DissociationLabel::None
    };
    let level = match label {
        DissociationLabel::Double if d >= th.distinct => SpecializationLevel::Distinct,
        DissociationLabel::Double if d > th.mild => SpecializationLevel::Mild,
        _ => SpecializationLevel::None,
    };
    Ok(Classification { label, level, signs: vec![sign(d_a), sign(d_b)] })
}

/// Any number of tasks. Level from the average score; label double when
/// every score is positive, inconsistent when every score is negative.
pub fn classify_multi(per_task: &[Option<f64>], th: &Thresholds) -> Result<Classification> {
    let d: Vec<f64> = per_task
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::invalid("classification needs every per-task score"))?;
    if d.len() == 2 {
        return classify_dual(d[0], d[1], th);
    }
    if d.is_empty() || d.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("classification needs finite scores"));
    }
    let avg = d.iter().sum::<f64>() / d.len() as f64;
    let level = if avg >= th.distinct {
        SpecializationLevel::Distinct
    } else if avg > th.mild {
        SpecializationLevel::Mild
    } else {
        SpecializationLevel::None
    };
    let label = if d.iter().all(|&x| x > 0.0) {
        DissociationLabel::Double
    } else if d.iter().all(|&x| x < 0.0) {
        DissociationLabel::Inconsistent
    } else {
        DissociationLabel::None
    };
    Ok(Classification { label, level, signs: d.iter().map(|&x| sign(x)).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissociationReport {
    pub tasks: Vec<String>,
    pub alpha: f64,
    pub table: PerfTable,
    pub rp: Vec<Vec<Option<f64>>>,
    pub scores: MultiDissociation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_distribution: Option<LayerDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_sets: Option<Vec<HeadSet>>,
}

impl DissociationReport {
    pub fn from_table(table: PerfTable, alpha: f64, th: &Thresholds) -> Self {
        let scores = multi_dissociation(&table);
        let classification = classify_multi(&scores.per_task, th).ok();
        Self {
            tasks: table.tasks.clone(),
            alpha,
            rp: table.rp_matrix(),
            table,
            scores,
            classification,
            overlap: None,
            layer_distribution: None,
            head_sets: None,
        }
    }

    pub fn to_csv(&self) -> String {
        self.table.to_csv(Some(&self.scores))
    }
}

/// Evaluates every task on its dev split, unpruned and with each head set
/// gated off. Metrics are reported in percent.
pub fn measure_pruned<T: Real>(
    model: &ModelState<T>,
    tasks: &[TaskData],
    sets: &[HeadSet],
    extra: &[HeadSet],
    exec: Exec,
) -> Result<PerfTable> {
    let (l, h) = (model.config.n_layers, model.config.n_heads);
    let idx: Vec<usize> = tasks.iter().map(|t| model.task_index(&t.spec.name)).collect::<Result<_>>()?;
    let mut gate_rows: Vec<Option<HeadGateVector>> = vec![None];
    for s in sets.iter().chain(extra) {
        gate_rows.push(Some(HeadGateVector::pruned(l, h, &s.members)?));
    }
    let n = tasks.len();
    let cells: Vec<(usize, usize)> = (0..gate_rows.len()).flat_map(|r| (0..n).map(move |i| (r, i))).collect();
    let vals = exec.try_map(&cells, |_, &(r, i)| {
        let t = &tasks[i];
        score(model, idx[i], &t.dev, t.spec.metric, gate_rows[r].as_ref(), Exec::Sequential).map(|v| 100.0 * v)
    })?;
    let row = |r: usize| vals[r * n..(r + 1) * n].to_vec();
    let mut table = PerfTable::new(
        tasks.iter().map(|t| t.spec.name.clone()).collect(),
        row(0),
        (1..=sets.len()).map(row).collect(),
    )?;
    table.extra_rows = extra.iter().enumerate().map(|(k, s)| (format!("{}_{:?}", s.task, s.mode).to_lowercase(), row(1 + sets.len() + k))).collect();
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IapOptions {
    pub alpha: f64,
    pub mode: SelectionMode,
    /// Seeds random selection and the random-heads baseline row.
    pub seed: u64,
    pub importance: ImportanceOptions,
    pub thresholds: Thresholds,
    /// Adds a row pruning the same number of randomly chosen heads.
    pub random_baseline: bool,
}

impl Default for IapOptions {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            mode: SelectionMode::Top,
            seed: 0,
            importance: ImportanceOptions::default(),
            thresholds: Thresholds::default(),
            random_baseline: true,
        }
    }
}

/// Scores heads for every task, prunes each task's selected heads in turn
/// and reports the dissociation scores with the head-set statistics.
pub fn iap<T: Real>(
    model: &ModelState<T>,
    tasks: &[TaskData],
    opts: &IapOptions,
    exec: Exec,
) -> Result<(ImportanceMatrix, DissociationReport)> {
    if tasks.len() < 2 {
        return Err(Error::invalid("dissociation needs at least two tasks"));
    }
    let imp = importance_matrix(model, tasks, &opts.importance, exec)?;
    let n_heads = model.config.n_heads;
    let sets = imp
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| select_heads(r, n_heads, opts.alpha, opts.mode, Some(mix_seed(&[opts.seed, i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    let mut extra = Vec::new();
    if opts.random_baseline {
        let flat = ImportanceRow { task: "all".into(), scores: vec![0.0; imp.rows[0].scores.len()], n_batches: 0, n_samples: 0 };
        extra.push(select_heads(&flat, n_heads, opts.alpha, SelectionMode::Random, Some(mix_seed(&[opts.seed, u64::MAX])))?);
    }
    let table = measure_pruned(model, tasks, &sets, &extra, exec)?;
    let mut report = DissociationReport::from_table(table, opts.alpha, &opts.thresholds);
    report.overlap = Some(overlap_matrix(&sets)?);
    report.layer_distribution = Some(layer_distribution(&sets, model.config.n_layers)?);
    report.head_sets = Some(sets);
    Ok((imp, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rp_examples() {
        assert_eq!(relative_performance(50.0, 50.0), Some(1.0));
        assert!((relative_performance(94.13, 85.94).unwrap() - 0.91299).abs() < 5e-6);
        assert_eq!(relative_performance(50.0, 0.0), Some(0.0));
        assert_eq!(relative_performance(0.0, 10.0), None);
        assert_eq!(relative_performance(-3.0, 10.0), None);
    }

    #[test]
    fn undefined_cells_excluded_not_clamped() {
        let t = PerfTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![50.0, -2.0, 80.0],
            vec![vec![40.0, 1.0, 70.0], vec![45.0, 2.0, 75.0], vec![48.0, 3.0, 60.0]],
        )
        .unwrap();
        let m = multi_dissociation(&t);
        assert!(m.per_task[0].is_some() && m.per_task[2].is_some());
        assert_eq!(m.per_task[1], None);
        assert_eq!(m.average, None);
        assert_eq!(m.excluded, vec![(0, 1), (1, 1), (2, 1)]);
        assert!(classify_multi(&m.per_task, &Thresholds::default()).is_err());
    }

    #[test]
    fn equal_rows_give_zero() {
        let t = PerfTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![90.0, 80.0, 70.0],
            vec![vec![60.0, 50.0, 40.0]; 3],
        )
        .unwrap();
        let m = multi_dissociation(&t);
        assert!(m.per_task.iter().all(|d| d.unwrap().abs() < 1e-12));
        let d = dual_dissociation(90.0, 80.0, 60.0, 60.0, 50.0, 50.0).unwrap();
        assert_eq!((d.d_a, d.d_b), (0.0, 0.0));
    }

    #[test]
    fn classification_examples() {
        let th = Thresholds::default();
        let c = classify_dual(6.905, 13.270, &th).unwrap();
        assert_eq!((c.label, c.level), (DissociationLabel::Double, SpecializationLevel::Distinct));
        assert_eq!(classify_dual(12.0, -3.0, &th).unwrap().label, DissociationLabel::Single);
        assert_eq!(classify_dual(-1.0, -2.0, &th).unwrap().label, DissociationLabel::Inconsistent);
        assert_eq!(classify_dual(4.0, -2.0, &th).unwrap().label, DissociationLabel::None);
        assert_eq!(classify_dual(3.0, 4.0, &th).unwrap().level, SpecializationLevel::None);
        let m = classify_multi(&[Some(7.0), Some(5.0), Some(6.0)], &th).unwrap();
        assert_eq!((m.label, m.level), (DissociationLabel::Double, SpecializationLevel::Mild));
        assert!(classify_dual(f64::NAN, 1.0, &th).is_err());
    }

    #[test]
    fn percent_rounding_half_up() {
        assert_eq!(percent2(2.675), "2.68");
        assert_eq!(percent2(7.2369), "7.24");
        assert_eq!(percent2(10.0), "10.00");
        assert_eq!(percent2(-1.005), "-1.01");
    }

    #[test]
    fn csv_round_trip_with_extra_rows() {
        let mut t = PerfTable::new(vec!["a".into(), "b".into()], vec![90.5, 80.25], vec![vec![60.0, 70.0], vec![85.0, 40.0]]).unwrap();
        t.extra_rows.push(("random".into(), vec![88.0, 77.0]));
        let m = multi_dissociation(&t);
        let csv = t.to_csv(Some(&m));
        assert!(csv.starts_with("pruned_for_task,a,b\na,60.00,70.00\n"));
        assert!(csv.contains("\nbase,90.50,80.25\nD_i,"));
        assert_eq!(PerfTable::from_csv(&csv).unwrap(), t);
        assert!(PerfTable::from_csv("x,a,b\n").is_err());
        assert!(PerfTable::from_csv("pruned_for_task,a,b\na,1,2\nbase,1,2\n").is_err());
    }

    fn dual_from_eq6(base: [f64; 2], p: [[f64; 2]; 2]) -> DualDissociation {
        dual_dissociation(base[0], base[1], p[0][0], p[1][0], p[0][1], p[1][1]).unwrap()
    }

    proptest! {
        #[test]
        fn dual_equals_multi_for_two_tasks(b in prop::array::uniform2(1.0f64..100.0), p in prop::array::uniform2(prop::array::uniform2(0.0f64..100.0))) {
            let d = dual_from_eq6(b, p);
            let t = PerfTable::new(vec!["a".into(), "b".into()], b.to_vec(), p.iter().map(|r| r.to_vec()).collect()).unwrap();
            let m = multi_dissociation(&t);
            prop_assert_eq!(m.per_task[0].unwrap(), d.d_a);
            prop_assert_eq!(m.per_task[1].unwrap(), d.d_b);
            prop_assert!((m.average.unwrap() - d.d).abs() < 1e-12);
        }

        #[test]
        fn invariant_to_per_task_rescaling(b in prop::array::uniform2(1.0f64..100.0), p in prop::array::uniform2(prop::array::uniform2(0.0f64..100.0)), c in 0.1f64..10.0) {
            let d = dual_from_eq6(b, p);
            let s = dual_from_eq6([b[0] * c, b[1]], [[p[0][0] * c, p[0][1]], [p[1][0] * c, p[1][1]]]);
            prop_assert!((d.d_a - s.d_a).abs() < 1e-9);
            prop_assert!((d.d_b - s.d_b).abs() < 1e-9);
        }

        #[test]
        fn swapping_tasks_swaps_scores(b in prop::array::uniform2(1.0f64..100.0), p in prop::array::uniform2(prop::array::uniform2(0.0f64..100.0))) {
            let d = dual_from_eq6(b, p);
            let s = dual_from_eq6([b[1], b[0]], [[p[1][1], p[1][0]], [p[0][1], p[0][0]]]);
            prop_assert_eq!(d.d_a, s.d_b);
            prop_assert_eq!(d.d_b, s.d_a);
            prop_assert!((d.d - s.d).abs() < 1e-12);
        }

        #[test]
        fn classify_total(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!(classify_dual(a, b, &Thresholds::default()).is_ok());
        }
    }
}
