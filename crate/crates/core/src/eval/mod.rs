//! Confusion matrices, accuracy / COVID sensitivity / COVID precision, and
//! side-by-side comparison tables.

use std::fmt;
use std::fmt::Write as _;

use crate::arch::CostReport;
use crate::classify::{predict_flat, predict_hier, Classifier, HierModel, Prediction};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::train::Dataset;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

const N: usize = 0;
const P: usize = 1;
const C: usize = 2;

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            n: classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(Self {
            n,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut m = Self::new(classes);
        for (t, p) in pairs {
            m.add(t, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::InvalidArgument(format!(
                "class pair ({truth}, {predicted}) outside {}x{0} matrix",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Collapses classes through `map` (old index → new index) on both axes.
    pub fn merged(&self, map: &[usize], classes: usize) -> Result<Self> {
        if map.len() != self.n {
            return Err(Error::shape("merge", "map", self.n, map.len()));
        }
        let mut out = Self::new(classes);
        for t in 0..self.n {
            for p in 0..self.n {
                let (a, b) = (map[t], map[p]);
                if a >= classes || b >= classes {
                    return Err(Error::InvalidArgument("merge target out of range".into()));
                }
                out.counts[a * classes + b] += self.get(t, p);
            }
        }
        Ok(out)
    }

    fn three(&self) {
        assert_eq!(self.n, 3, "COVID accessors need the 3-class matrix");
    }

    pub fn tp_n(&self) -> u64 {
        self.three();
        self.get(N, N)
    }

    pub fn tp_p(&self) -> u64 {
        self.three();
        self.get(P, P)
    }

    pub fn tp_c(&self) -> u64 {
        self.three();
        self.get(C, C)
    }

    /// COVID19 samples predicted as anything else.
    pub fn fn_c(&self) -> u64 {
        self.three();
        self.get(C, N) + self.get(C, P)
    }

    /// Non-COVID samples predicted as COVID19.
    pub fn fp_c(&self) -> u64 {
        self.three();
        self.get(N, C) + self.get(P, C)
    }

    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("true\\pred");
        for n in names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (i, row) in self.counts.chunks(self.n).enumerate() {
            s.push_str(names.get(i).copied().unwrap_or("?"));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Reads back the layout written by [`ConfusionMatrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(format!("confusion csv: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let n = header.split(',').count() - 1;
        let mut rows = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<u64>()
                        .map_err(|_| bad(format!("row {}: `{v}` is not a count", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.len() != n || n == 0 {
            return Err(bad(format!("expected {n} rows, found {}", rows.len())));
        }
        let refs: Vec<&[u64]> = rows.iter().map(Vec::as_slice).collect();
        Self::from_rows(&refs)
    }

    pub fn to_text(&self, names: &[&str]) -> String {
        let w = names.iter().map(|n| n.len()).max().unwrap_or(1).max(6);
        let mut s = format!("{:>w$}", "");
        for n in names {
            let _ = write!(s, " {n:>w$}");
        }
        s.push('\n');
        for (i, row) in self.counts.chunks(self.n).enumerate() {
            let _ = write!(s, "{:>w$}", names.get(i).copied().unwrap_or("?"));
            for v in row {
                let _ = write!(s, " {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// A ratio that may be undefined (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio(pub Option<f64>);

impl Ratio {
    pub fn of(num: u64, den: u64) -> Self {
        Ratio((den > 0).then(|| num as f64 / den as f64))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{:.1}%", v * 100.0),
            None => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Ratio,
    pub covid_sensitivity: Ratio,
    pub covid_positive_prediction: Ratio,
    pub samples: u64,
}

impl MetricsReport {
    pub fn from_confusion(m: &ConfusionMatrix) -> Self {
        Self {
            accuracy: Ratio::of(m.trace(), m.total()),
            covid_sensitivity: Ratio::of(m.tp_c(), m.tp_c() + m.fn_c()),
            covid_positive_prediction: Ratio::of(m.tp_c(), m.tp_c() + m.fp_c()),
            samples: m.total(),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "Acc {}  Se_C {}  +P_C {}  (n={})",
            self.accuracy, self.covid_sensitivity, self.covid_positive_prediction, self.samples
        )
    }
}

/// Maps a 3-class index to the root's binary space (COVID19 joins Pneumonia).
pub const ROOT_MERGE: [usize; 3] = [0, 1, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// Hierarchical only: root decisions, Normal vs Pneumonia-like.
    pub stage1: Option<ConfusionMatrix>,
    /// Hierarchical only: leaf decisions on truly non-Normal samples the
    /// root passed down, Pneumonia vs COVID19.
    pub stage2: Option<ConfusionMatrix>,
}

pub fn confusion_from_predictions(truth: &[usize], preds: &[Prediction]) -> Result<ConfusionMatrix> {
    if truth.len() != preds.len() {
        return Err(Error::shape("evaluate", "predictions", truth.len(), preds.len()));
    }
    ConfusionMatrix::from_pairs(3, truth.iter().zip(preds).map(|(&t, p)| (t, p.label as usize)))
}

/// Root and leaf matrices read off the stage trace of each prediction.
pub fn stage_matrices(truth: &[usize], preds: &[Prediction]) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    use crate::classify::{argmax, Stage};
    let mut s1 = ConfusionMatrix::new(2);
    let mut s2 = ConfusionMatrix::new(2);
    for (&t, p) in truth.iter().zip(preds) {
        let root = p
            .stage(Stage::Root)
            .ok_or_else(|| Error::InvalidArgument("prediction has no root stage".into()))?;
        s1.add(ROOT_MERGE[t], argmax(&root.probs))?;
        if let (Some(leaf), true) = (p.stage(Stage::Leaf), t != Label::Normal as usize) {
            s2.add(t - 1, argmax(&leaf.probs))?;
        }
    }
    Ok((s1, s2))
}

const EVAL_BATCH: usize = 32;

fn run(
    data: &dyn Dataset,
    mut predict: impl FnMut(&crate::tensor::Tensor) -> Result<Vec<Prediction>>,
) -> Result<(Vec<usize>, Vec<Prediction>)> {
    if data.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        preds.extend(predict(&data.batch(chunk)?)?);
    }
    let truth = idx.iter().map(|&i| data.label(i)).collect();
    Ok((truth, preds))
}

/// `data` must be labelled in the flat 3-class space.
pub fn evaluate_flat(model: &dyn Classifier, data: &dyn Dataset) -> Result<Evaluation> {
    let (truth, predictions) = run(data, |b| predict_flat(model, b))?;
    let confusion = confusion_from_predictions(&truth, &predictions)?;
    Ok(Evaluation {
        report: MetricsReport::from_confusion(&confusion),
        confusion,
        predictions,
        stage1: None,
        stage2: None,
    })
}

/// `data` must be labelled in the flat 3-class space.
pub fn evaluate_hier(model: &HierModel, data: &dyn Dataset) -> Result<Evaluation> {
    let (truth, predictions) = run(data, |b| predict_hier(model, b))?;
    let confusion = confusion_from_predictions(&truth, &predictions)?;
    let (s1, s2) = stage_matrices(&truth, &predictions)?;
    Ok(Evaluation {
        report: MetricsReport::from_confusion(&confusion),
        confusion,
        predictions,
        stage1: Some(s1),
        stage2: Some(s2),
    })
}

pub struct CompareRow<'a> {
    pub name: &'a str,
    pub metrics: &'a MetricsReport,
    pub cost: Option<&'a CostReport>,
}

/// Machine-readable CSV and an aligned text table, rows in the given order.
pub fn compare_report(rows: &[CompareRow<'_>]) -> (String, String) {
    let header = ["model", "acc", "se_c", "pp_c", "params", "macs", "memory_mib"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let cost = |f: fn(&CostReport) -> String| r.cost.map(f).unwrap_or_default();
            vec![
                r.name.to_string(),
                r.metrics.accuracy.to_string(),
                r.metrics.covid_sensitivity.to_string(),
                r.metrics.covid_positive_prediction.to_string(),
                cost(|c| c.param_count.to_string()),
                cost(|c| c.mac_count.to_string()),
                cost(|c| format!("{:.1}", c.memory_mib())),
            ]
        })
        .collect();

    let mut csv = header.join(",");
    csv.push('\n');
    for row in &cells {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    let titles = ["Model", "Acc", "Se_C", "+P_C", "#Params", "MACs", "Memory (MiB)"];
    let widths: Vec<usize> = (0..titles.len())
        .map(|i| {
            cells
                .iter()
                .map(|r| r[i].len())
                .chain([titles[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |vals: &[&str]| {
        let mut s = String::new();
        for (i, v) in vals.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{v:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {v:>w$}", w = widths[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut text = line(&titles);
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    text.push('\n');
    for row in &cells {
        text.push_str(&line(&row.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    (csv, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_row_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[&[100, 0, 0], &[13, 87, 0], &[0, 1, 30]]).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let m = flat_row_matrix();
        let csv = m.to_csv(&["Normal", "Pneumonia", "COVID19"]);
        assert_eq!(ConfusionMatrix::from_csv(&csv).unwrap(), m);
        assert!(ConfusionMatrix::from_csv("true\\pred,a,b\na,1,2\n").is_err());
        assert!(ConfusionMatrix::from_csv("true\\pred,a\na,x\n").is_err());
    }

    #[test]
    fn reported_flat_row() {
        let m = flat_row_matrix();
        assert_eq!((m.tp_n(), m.tp_p(), m.tp_c(), m.fn_c(), m.fp_c()), (100, 87, 30, 1, 0));
        let r = MetricsReport::from_confusion(&m);
        assert_eq!(r.accuracy.to_string(), "93.9%");
        assert_eq!(r.covid_sensitivity.to_string(), "96.8%");
        assert_eq!(r.covid_positive_prediction.to_string(), "100.0%");
        assert_eq!(m.row_sums(), [100, 100, 31]);
    }

    #[test]
    fn se_c_29_of_31() {
        let m = ConfusionMatrix::from_rows(&[&[100, 0, 0], &[0, 100, 0], &[1, 1, 29]]).unwrap();
        assert_eq!(MetricsReport::from_confusion(&m).covid_sensitivity.to_string(), "93.5%");
    }

    #[test]
    fn all_correct_and_undefined() {
        let m = ConfusionMatrix::from_rows(&[&[5, 0, 0], &[0, 4, 0], &[0, 0, 2]]).unwrap();
        let r = MetricsReport::from_confusion(&m);
        assert_eq!(r.accuracy.0, Some(1.0));
        assert_eq!(r.covid_sensitivity.0, Some(1.0));
        assert_eq!(r.covid_positive_prediction.0, Some(1.0));
        let none = ConfusionMatrix::from_rows(&[&[5, 0, 0], &[0, 4, 0], &[1, 0, 0]]).unwrap();
        let r = MetricsReport::from_confusion(&none);
        assert_eq!(r.covid_positive_prediction.to_string(), "undefined");
        assert_eq!(r.covid_sensitivity.0, Some(0.0));
    }

    #[test]
    fn merge_to_root_space() {
        let s1 = flat_row_matrix().merged(&ROOT_MERGE, 2).unwrap();
        assert_eq!(
            (s1.get(0, 0), s1.get(0, 1), s1.get(1, 0), s1.get(1, 1)),
            (100, 0, 13, 118)
        );
    }

    #[test]
    fn comparison_keeps_order() {
        let a = MetricsReport::from_confusion(&flat_row_matrix());
        let cost = CostReport::for_spec(&crate::arch::build_arch(crate::arch::Variant::B3, 3, true).unwrap());
        let rows = [
            CompareRow {
                name: "zeta",
                metrics: &a,
                cost: None,
            },
            CompareRow {
                name: "B3-flat",
                metrics: &a,
                cost: Some(&cost),
            },
        ];
        let (csv, text) = compare_report(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,acc,se_c,pp_c,params,macs,memory_mib");
        assert!(lines[1].starts_with("zeta,93.9%,96.8%,100.0%,,,"));
        assert!(lines[2].starts_with(&format!("B3-flat,93.9%,96.8%,100.0%,{},", cost.param_count)));
        assert_eq!(text.lines().count(), 4);
        let (one, _) = compare_report(&rows[..1]);
        assert_eq!(one.lines().count(), 2);
    }
}
