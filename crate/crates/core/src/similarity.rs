//! Task similarity from sentence representations and transfer results, and
//! its correlation with dissociation scores.
//!
//! * DSE: mean cosine between two models' representations of the same probe
//!   sentences.
//! * CRA: rank correlation between two models' representation dissimilarity
//!   matrices (`1 − cosine`), over the upper triangle.
//! * AHP: for each target task, the principal eigenvector of the pairwise
//!   ratio matrix `W[i][j] = P[i][t] / P[j][t]` over the other tasks as
//!   sources, normalized to sum 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ModelState, Pooling};
use crate::tasks::metrics::{pearson, spearman};
use crate::tasks::EncodedInput;

pub const AHP_CONSTRUCTION: &str =
    "per target t: W[i][j] = P[i][t] / P[j][t] over sources i, j != t; column = principal eigenvector of W (power iteration, 100 steps, uniform start), normalized to sum 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SimilarityMetric {
    Dse,
    Cra,
    Ahp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RdmCorrelation {
    #[default]
    Spearman,
    Pearson,
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dse" => Ok(Self::Dse),
            "cra" => Ok(Self::Cra),
            "ahp" => Ok(Self::Ahp),
            _ => Err(Error::invalid(format!("unknown similarity metric `{s}`"))),
        }
    }
}

impl std::str::FromStr for RdmCorrelation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spearman" => Ok(Self::Spearman),
            "pearson" => Ok(Self::Pearson),
            _ => Err(Error::invalid(format!("unknown correlation `{s}`"))),
        }
    }
}

/// Pooled representation of every probe at encoder `layer` (last layer when
/// `None`), taken through task head `task`'s forward pass.
pub fn extract_representations<T: Real>(
    model: &ModelState<T>,
    task: usize,
    probes: &[EncodedInput],
    layer: Option<usize>,
    pooling: Pooling,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let l = layer.unwrap_or(model.config.n_layers - 1);
    if l >= model.config.n_layers {
        return Err(Error::invalid(format!("layer {l} >= {} layers", model.config.n_layers)));
    }
    exec.try_map(probes, |_, p| {
        let tr = model.capture_head_outputs(task, p, pooling)?;
        Ok(tr.pooled[l].data().iter().map(|v| v.as_f64()).collect())
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Representation dissimilarity matrix over the sentences with non-zero
/// representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rdm {
    /// Indices of the sentences kept.
    pub kept: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl Rdm {
    pub fn new(reps: &[Vec<f64>]) -> Self {
        let kept: Vec<usize> = (0..reps.len()).filter(|&i| norm(&reps[i]) > 0.0).collect();
        Self::over(reps, &kept)
    }

    fn over(reps: &[Vec<f64>], kept: &[usize]) -> Self {
        let s = kept.len();
        let mut values = vec![vec![0.0; s]; s];
        for a in 0..s {
            for b in a + 1..s {
                let d = 1.0 - cosine(&reps[kept[a]], &reps[kept[b]]);
                values[a][b] = d;
                values[b][a] = d;
            }
        }
        Self { kept: kept.to_vec(), values }
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let s = self.values.len();
        (0..s).flat_map(|a| (a + 1..s).map(move |b| (a, b))).map(|(a, b)| self.values[a][b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub metric: SimilarityMetric,
    pub tasks: Vec<String>,
    /// `values[i][j]`; for AHP row `i` is the source and column `j` the
    /// target. `None` where undefined.
    pub values: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub construction: Option<String>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.tasks.iter().position(|t| t == a)?;
        let j = self.tasks.iter().position(|t| t == b)?;
        self.values[i][j]
    }

    /// Symmetrized value for an unordered task pair.
    pub fn pair_value(&self, a: &str, b: &str) -> Option<f64> {
        match (self.get(a, b), self.get(b, a)) {
            (Some(x), Some(y)) => Some((x + y) / 2.0),
            (x, y) => x.or(y),
        }
    }

    /// `metric,source,target,value` with 9 significant digits; undefined
    /// cells are left empty.
    pub fn to_csv(&self) -> String {
        let name = serde_json::to_value(self.metric).unwrap();
        let name = name.as_str().unwrap();
        let mut out = String::from("metric,source,target,value\n");
        for (i, a) in self.tasks.iter().enumerate() {
            for (j, b) in self.tasks.iter().enumerate() {
                let v = self.values[i][j].map(|v| crate::importance::sig_digits(v, 9)).unwrap_or_default();
                writeln!(out, "{name},{a},{b},{v}").unwrap();
            }
        }
        out
    }
}

impl SimilarityMatrix {
    /// Parses the long format written by [`SimilarityMatrix::to_csv`]. Task
    /// order follows first appearance.
    pub fn from_csv(content: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(content.as_bytes());
        let mut metric = None;
        let mut tasks: Vec<String> = Vec::new();
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let err = |m: String| Error::Parse { path: "similarity csv".into(), line: i + 2, message: m };
            if rec.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", rec.len())));
            }
            let m: SimilarityMetric =
                serde_json::from_value(serde_json::Value::String(rec[0].to_string())).map_err(|e| err(e.to_string()))?;
            if *metric.get_or_insert(m) != m {
                return Err(err("mixed metrics in one file".into()));
            }
            for t in [&rec[1], &rec[2]] {
                if !tasks.iter().any(|x| x == t) {
                    tasks.push(t.to_string());
                }
            }
            let v = match rec[3].trim() {
                "" => None,
                x => Some(x.parse::<f64>().map_err(|_| err(format!("value `{x}` is not a number")))?),
            };
            cells.push((rec[1].to_string(), rec[2].to_string(), v));
        }
        let metric = metric.ok_or_else(|| Error::invalid("similarity csv has no rows"))?;
        let n = tasks.len();
        let mut values = vec![vec![None; n]; n];
        for (a, b, v) in cells {
            let i = tasks.iter().position(|t| *t == a).unwrap();
            let j = tasks.iter().position(|t| *t == b).unwrap();
            values[i][j] = v;
        }
        let construction = (metric == SimilarityMetric::Ahp).then(|| AHP_CONSTRUCTION.to_string());
        Ok(Self { metric, tasks, values, flags: Vec::new(), construction })
    }
}

fn check_reps(tasks: &[String], reps: &[Vec<Vec<f64>>]) -> Result<usize> {
    if tasks.len() != reps.len() || tasks.len() < 2 {
        return Err(Error::invalid("similarity needs representations for at least two tasks"));
    }
    let s = reps[0].len();
    if s < 2 {
        return Err(Error::invalid("similarity needs at least two probe sentences"));
    }
    for r in reps {
        if r.len() != s {
            return Err(Error::invalid("every task needs one representation per probe sentence"));
        }
        for (k, v) in r.iter().enumerate() {
            if v.len() != reps[0][k].len() {
                return Err(Error::invalid(format!("sentence {k}: representation dimensions differ")));
            }
        }
    }
    Ok(s)
}

/// Mean cosine over sentences; sentences with a zero-norm representation on
/// either side are excluded and flagged.
pub fn dse(tasks: &[String], reps: &[Vec<Vec<f64>>]) -> Result<SimilarityMatrix> {
    let s = check_reps(tasks, reps)?;
    let n = tasks.len();
    let mut flags = Vec::new();
    for (t, r) in tasks.iter().zip(reps) {
        let zero: Vec<usize> = (0..s).filter(|&k| norm(&r[k]) == 0.0).collect();
        if !zero.is_empty() {
            flags.push(format!("{t}: zero-norm representation for sentences {zero:?} excluded"));
        }
    }
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let ok: Vec<usize> = (0..s).filter(|&k| norm(&reps[i][k]) > 0.0 && norm(&reps[j][k]) > 0.0).collect();
            let v = (!ok.is_empty()).then(|| {
                if i == j {
                    1.0
                } else {
                    ok.iter().map(|&k| cosine(&reps[i][k], &reps[j][k])).sum::<f64>() / ok.len() as f64
                }
            });
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(SimilarityMatrix { metric: SimilarityMetric::Dse, tasks: tasks.to_vec(), values, flags, construction: None })
}

/// Correlation of RDM upper triangles over the sentences valid for both
/// tasks. Constant RDMs leave the cell undefined and flagged.
pub fn cra(tasks: &[String], reps: &[Vec<Vec<f64>>], stat: RdmCorrelation) -> Result<SimilarityMatrix> {
    let s = check_reps(tasks, reps)?;
    let n = tasks.len();
    let mut values = vec![vec![None; n]; n];
    let mut flags = Vec::new();
    for i in 0..n {
        for j in i..n {
            let ok: Vec<usize> = (0..s).filter(|&k| norm(&reps[i][k]) > 0.0 && norm(&reps[j][k]) > 0.0).collect();
            let (a, b) = (Rdm::over(&reps[i], &ok).upper_triangle(), Rdm::over(&reps[j], &ok).upper_triangle());
            let v = match stat {
                RdmCorrelation::Spearman => spearman(&a, &b),
                RdmCorrelation::Pearson => pearson(&a, &b),
            };
            if v.is_none() {
                flags.push(format!("{}/{}: RDM has zero variance, correlation undefined", tasks[i], tasks[j]));
            }
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let construction = Some(format!("RDM = 1 - cosine, compared by {stat:?} over the upper triangle"));
    Ok(SimilarityMatrix { metric: SimilarityMetric::Cra, tasks: tasks.to_vec(), values, flags, construction })
}

/// Principal eigenvector by power iteration from a uniform start, normalized
/// to sum 1.
pub fn principal_eigenvector(w: &[Vec<f64>], steps: usize) -> Vec<f64> {
    let m = w.len();
    let mut v = vec![1.0 / m as f64; m];
    for _ in 0..steps {
        let mut nv: Vec<f64> = (0..m).map(|i| (0..m).map(|j| w[i][j] * v[j]).sum()).collect();
        let s: f64 = nv.iter().sum();
        for x in &mut nv {
            *x /= s;
        }
        v = nv;
    }
    v
}

/// Affinities from transfer results `p[source][target]` (diagonal ignored).
pub fn ahp(tasks: &[String], p: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    let n = tasks.len();
    if n < 2 || p.len() != n || p.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("AHP needs a complete square transfer matrix over at least two tasks"));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && !(p[i][j] > 0.0 && p[i][j].is_finite()) {
                return Err(Error::invalid(format!("transfer result {}->{} must be > 0", tasks[i], tasks[j])));
            }
        }
    }
    let mut values = vec![vec![None; n]; n];
    for t in 0..n {
        let src: Vec<usize> = (0..n).filter(|&i| i != t).collect();
        let w: Vec<Vec<f64>> = src.iter().map(|&i| src.iter().map(|&j| p[i][t] / p[j][t]).collect()).collect();
        for (k, v) in principal_eigenvector(&w, 100).into_iter().enumerate() {
            values[src[k]][t] = Some(v);
        }
    }
    Ok(SimilarityMatrix {
        metric: SimilarityMetric::Ahp,
        tasks: tasks.to_vec(),
        values,
        flags: Vec::new(),
        construction: Some(AHP_CONSTRUCTION.into()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    /// Scatter data `(x, y)`.
    pub points: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

/// Pearson, Spearman and the least-squares line of `y` on `x`.
pub fn correlate(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::invalid("series lengths differ"));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation needs finite values"));
    }
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let (slope, intercept) = if sxx > 0.0 {
        let s = sxy / sxx;
        (Some(s), Some(my - s * mx))
    } else {
        (None, None)
    };
    let pr = pearson(x, y);
    let flag = pr.is_none().then(|| "zero variance in a series; correlation undefined".to_string());
    Ok(Correlation {
        n,
        pearson: pr,
        spearman: spearman(x, y),
        slope,
        intercept,
        flag,
        points: x.iter().copied().zip(y.iter().copied()).collect(),
        labels: Vec::new(),
    })
}

/// Matches similarity values with dissociation scores over task pairs.
/// Pairs whose similarity is undefined are skipped.
pub fn pair_series(sim: &SimilarityMatrix, pairs: &[(String, String, f64)]) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    for (a, b, d) in pairs {
        if let Some(s) = sim.pair_value(a, b) {
            xs.push(s);
            ys.push(*d);
            labels.push(format!("{a}/{b}"));
        }
    }
    (xs, ys, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn dse_identity_and_negation() {
        let r = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.2, 0.2]];
        let neg: Vec<Vec<f64>> = r.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let m = dse(&names(3), &[r.clone(), r.clone(), neg]).unwrap();
        assert!((m.values[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert!((m.values[0][2].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.values[2][2], Some(1.0));
    }

    #[test]
    fn dse_hand_computed() {
        // cos((1,0),(0,1)) = 0; cos((1,1),(1,0)) = 1/sqrt 2; cos((3,4),(4,3)) = 24/25
        let a = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![3.0, 4.0]];
        let b = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![4.0, 3.0]];
        let want = (0.0 + 1.0 / 2f64.sqrt() + 24.0 / 25.0) / 3.0;
        let m = dse(&names(2), &[a, b]).unwrap();
        assert!((m.values[0][1].unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn dse_zero_norm_excluded_and_flagged() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![1.0, 0.0], vec![5.0, 5.0], vec![0.0, 1.0]];
        let m = dse(&names(2), &[a, b]).unwrap();
        assert_eq!(m.values[0][1], Some(1.0));
        assert_eq!(m.flags.len(), 1);
    }

    #[test]
    fn cra_monotone_transform_and_oracle() {
        let a = vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![-1.0, 0.5, 2.0]];
        let m = cra(&names(2), &[a.clone(), a.clone()], RdmCorrelation::Spearman).unwrap();
        assert_eq!(m.values[0][1], Some(1.0));
        let b = vec![vec![0.0, 1.0, 0.0], vec![2.0, 1.0, 0.0], vec![1.0, 1.0, 1.0], vec![0.3, -1.0, 0.2]];
        let ra = Rdm::new(&a).upper_triangle();
        let rb = Rdm::new(&b).upper_triangle();
        assert_eq!(ra.len(), 6);
        // brute-force Spearman without ties: 1 - 6 Σd² / (n(n²-1))
        let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| v.iter().filter(|y| *y < x).count() as f64 + 1.0).collect() };
        let (ka, kb) = (rank(&ra), rank(&rb));
        let d2: f64 = ka.iter().zip(&kb).map(|(x, y)| (x - y).powi(2)).sum();
        let want = 1.0 - 6.0 * d2 / (6.0 * 35.0);
        let got = cra(&names(2), &[a, b], RdmCorrelation::Spearman).unwrap().values[0][1].unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn cra_constant_rdm_flagged() {
        let a = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        let b = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let m = cra(&names(2), &[a, b], RdmCorrelation::Spearman).unwrap();
        assert_eq!(m.values[0][1], None);
        assert!(!m.flags.is_empty());
    }

    #[test]
    fn ahp_examples() {
        let p = vec![vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]];
        let m = ahp(&names(3), &p).unwrap();
        assert!((m.values[0][2].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(m.values[2][2], None);
        let p = vec![vec![0.0, 1.0, 0.8], vec![1.0, 0.0, 0.4], vec![1.0, 1.0, 0.0]];
        let m = ahp(&names(3), &p).unwrap();
        assert!((m.values[0][2].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.values[1][2].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let bad = vec![vec![0.0, -1.0], vec![1.0, 0.0]];
        assert!(ahp(&names(2), &bad).is_err());
    }

    #[test]
    fn correlate_examples() {
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
        let c = correlate(&x, &y).unwrap();
        assert!((c.pearson.unwrap() + 1.0).abs() < 1e-12);
        assert!((c.slope.unwrap() + 2.0).abs() < 1e-12);
        assert!((c.intercept.unwrap() - 1.0).abs() < 1e-12);
        let flat = correlate(&x, &[3.0; 6]).unwrap();
        assert!(flat.pearson.is_none() && flat.flag.is_some());
        assert!(correlate(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn correlate_matches_covariance_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = 10.0;
        let ex = x.iter().sum::<f64>() / n;
        let ey = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n - ex * ey;
        let vx = x.iter().map(|a| a * a).sum::<f64>() / n - ex * ex;
        let vy = y.iter().map(|b| b * b).sum::<f64>() / n - ey * ey;
        let want = cov / (vx * vy).sqrt();
        assert!((correlate(&x, &y).unwrap().pearson.unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn csv_long_format() {
        let p = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let csv = ahp(&names(2), &p).unwrap().to_csv();
        assert!(csv.starts_with("metric,source,target,value\nAHP,t0,t0,\nAHP,t0,t1,1.00000000\n"));
        let back = SimilarityMatrix::from_csv(&csv).unwrap();
        assert_eq!(back.values[0][1], Some(1.0));
        assert_eq!(back.values[0][0], None);
    }

    fn reps_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 5),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 5),
        )
    }

    proptest! {
        #[test]
        fn dse_and_cra_symmetric((a, b) in reps_strategy()) {
            let ab = dse(&names(2), &[a.clone(), b.clone()]).unwrap();
            let ba = dse(&names(2), &[b.clone(), a.clone()]).unwrap();
            prop_assert_eq!(ab.values[0][1], ba.values[0][1]);
            let ab = cra(&names(2), &[a.clone(), b.clone()], RdmCorrelation::Spearman).unwrap();
            let ba = cra(&names(2), &[b, a], RdmCorrelation::Spearman).unwrap();
            prop_assert_eq!(ab.values[0][1], ba.values[0][1]);
        }

        #[test]
        fn rdm_invariants((a, _) in reps_strategy()) {
            let r = Rdm::new(&a);
            for i in 0..r.values.len() {
                prop_assert_eq!(r.values[i][i], 0.0);
                for j in 0..r.values.len() {
                    prop_assert_eq!(r.values[i][j], r.values[j][i]);
                    prop_assert!((0.0..=2.0).contains(&r.values[i][j]));
                }
            }
        }

        #[test]
        fn ahp_column_scale_invariant(p in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 4), 4), c in 0.1f64..10.0) {
            let mut q = p.clone();
            for row in q.iter_mut() {
                row[1] *= c;
            }
            let a = ahp(&names(4), &p).unwrap();
            let b = ahp(&names(4), &q).unwrap();
            for i in 0..4 {
                if let (Some(x), Some(y)) = (a.values[i][1], b.values[i][1]) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn pearson_symmetric(x in prop::collection::vec(-5.0f64..5.0, 3..12), seed in any::<u64>()) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.3 + (seed % 7) as f64 * i as f64).sin()).collect();
            let a = correlate(&x, &y).unwrap().pearson;
            let b = correlate(&y, &x).unwrap().pearson;
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
