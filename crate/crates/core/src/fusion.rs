//! Weighted late fusion of per-modality scores, decisions, metrics and reports.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::{argmax_rows, ScoreMatrix};
use crate::error::{Error, Result};
use crate::parsemap::encode_gray;
use crate::tensor::Tensor;

/// Ordered `(modality, weight)` pairs; weights are nonnegative and not all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, f64)>", into = "Vec<(String, f64)>")]
pub struct EnsembleWeights {
    pairs: Vec<(String, f64)>,
}

impl EnsembleWeights {
    pub fn new(pairs: Vec<(String, f64)>) -> Result<Self> {
        if let Some((m, w)) = pairs.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("weight {w} for {m} must be finite and >= 0")));
        }
        if !pairs.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::Config("at least one ensemble weight must be positive".into()));
        }
        for (i, (m, _)) in pairs.iter().enumerate() {
            if pairs[..i].iter().any(|(o, _)| o == m) {
                return Err(Error::Config(format!("modality {m} weighted twice")));
            }
        }
        Ok(Self { pairs })
    }

    /// J:B:JM:BM:P = 2:2:1:1:2.
    pub fn five_way() -> Self {
        let pairs = [("J", 2.0), ("B", 2.0), ("JM", 1.0), ("BM", 1.0), ("P", 2.0)];
        Self { pairs: pairs.iter().map(|&(m, w)| (m.to_string(), w)).collect() }
    }

    pub fn pairs(&self) -> &[(String, f64)] {
        &self.pairs
    }

    pub fn get(&self, modality: &str) -> Option<f64> {
        self.pairs.iter().find(|(m, _)| m == modality).map(|(_, w)| *w)
    }

    /// Keeps only the listed modalities, in the listed order.
    pub fn restrict(&self, modalities: &[&str]) -> Result<Self> {
        let pairs = modalities
            .iter()
            .map(|m| {
                self.get(m)
                    .map(|w| (m.to_string(), w))
                    .ok_or_else(|| Error::Config(format!("no ensemble weight for {m}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.pairs.iter().map(|(m, w)| (m.clone(), w * c)).collect())
    }

    pub fn label(&self) -> String {
        self.pairs.iter().map(|(m, _)| m.as_str()).collect::<Vec<_>>().join("+")
    }
}

impl TryFrom<Vec<(String, f64)>> for EnsembleWeights {
    type Error = Error;

    fn try_from(pairs: Vec<(String, f64)>) -> Result<Self> {
        Self::new(pairs)
    }
}

impl From<EnsembleWeights> for Vec<(String, f64)> {
    fn from(w: EnsembleWeights) -> Self {
        w.pairs
    }
}

/// `J:2,B:2,P:2`
impl FromStr for EnsembleWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let pairs = s
            .split(',')
            .map(|item| {
                let (m, w) = item
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("weight {item:?} is not MODALITY:WEIGHT")))?;
                let w = w.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad weight in {item:?}")))?;
                Ok((m.trim().to_string(), w))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

/// `fused[i] = sum_m w_m * scores_m[i]`, matrices paired with weights by position.
pub fn late_fuse(scores: &[&ScoreMatrix], w: &EnsembleWeights) -> Result<ScoreMatrix> {
    let first = scores.first().ok_or_else(|| Error::shape("late_fuse", "no score matrices"))?;
    if scores.len() != w.pairs().len() {
        return Err(Error::shape("late_fuse", format!("{} matrices, {} weights", scores.len(), w.pairs().len())));
    }
    for s in &scores[1..] {
        if s.sample_ids != first.sample_ids {
            return Err(Error::SampleMismatch);
        }
        if s.classes() != first.classes() {
            return Err(Error::shape("late_fuse", format!("{} vs {} classes", s.classes(), first.classes())));
        }
    }
    let mut acc = vec![0f64; first.scores.len()];
    for (s, (_, wm)) in scores.iter().zip(w.pairs()) {
        for (a, &v) in acc.iter_mut().zip(s.scores.data()) {
            *a += wm * v as f64;
        }
    }
    let fused = Tensor::new(first.scores.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())?;
    ScoreMatrix::new(w.label(), first.sample_ids.clone(), first.labels.clone(), fused)
}

/// Row-wise softmax computed in `f64`.
pub fn softmax_rows(scores: &Tensor<f32>) -> Tensor<f64> {
    let k = scores.shape()[scores.rank() - 1];
    let mut out = Vec::with_capacity(scores.len());
    for row in scores.data().chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::new(scores.shape().to_vec(), out).expect("same shape")
}

/// Predicted class per row. Softmax is strictly monotonic, so the decision is
/// the raw-score argmax; ties go to the smallest class index.
pub fn decide(fused: &ScoreMatrix) -> Vec<usize> {
    argmax_rows(&fused.scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`
    pub confusion: Vec<Vec<u64>>,
}

pub fn compute_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for l in [p, t] {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        confusion[t][p] += 1;
    }
    let trace: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Metrics { top1: trace as f64 / pred.len() as f64, per_class_accuracy, confusion })
}

/// Exhaustive search over the Cartesian product of per-modality candidates.
/// All-zero combinations are skipped; ties keep the lexicographically smallest vector.
pub fn grid_search_weights(
    scores: &[&ScoreMatrix],
    truth: &[usize],
    grid: &[Vec<f64>],
) -> Result<(EnsembleWeights, f64)> {
    if grid.len() != scores.len() || grid.iter().any(|g| g.is_empty()) {
        return Err(Error::Config("grid needs a nonempty candidate list per modality".into()));
    }
    let classes = scores[0].classes();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut idx = vec![0usize; grid.len()];
    loop {
        let cand: Vec<f64> = idx.iter().zip(grid).map(|(&i, g)| g[i]).collect();
        if cand.iter().any(|&w| w > 0.0) {
            let w =
                EnsembleWeights::new(scores.iter().map(|s| s.modality.clone()).zip(cand.iter().copied()).collect())?;
            let top1 = compute_metrics(&decide(&late_fuse(scores, &w)?), truth, classes)?.top1;
            let better = match &best {
                None => true,
                Some((bw, bt)) => top1 > *bt || (top1 == *bt && cand.partial_cmp(bw) == Some(std::cmp::Ordering::Less)),
            };
            if better {
                best = Some((cand, top1));
            }
        }
        // odometer increment
        let mut pos = grid.len();
        loop {
            if pos == 0 {
                let (w, top1) = best.ok_or_else(|| Error::Config("grid contains only all-zero weights".into()))?;
                let pairs = scores.iter().map(|s| s.modality.clone()).zip(w).collect();
                return Ok((EnsembleWeights::new(pairs)?, top1));
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < grid[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

pub fn confusion_csv(m: &Metrics) -> String {
    let k = m.confusion.len();
    let mut out = String::from("truth");
    for j in 0..k {
        let _ = write!(out, ",pred_{j}");
    }
    out.push('\n');
    for (i, row) in m.confusion.iter().enumerate() {
        let _ = write!(out, "{i}");
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

/// Confusion counts as a `K x K` grayscale heatmap, linearly scaled so the largest count is 255.
pub fn confusion_pgm(m: &Metrics) -> Result<Vec<u8>> {
    let k = m.confusion.len();
    let max = m.confusion.iter().flatten().copied().max().unwrap_or(0);
    let pixels: Vec<u8> =
        m.confusion.iter().flatten().map(|&c| if max == 0 { 0 } else { ((c * 255 + max / 2) / max) as u8 }).collect();
    encode_gray(&pixels, k as u32, k as u32)
}

/// Fusion rows of the modality ablation table, filtered to what is available:
/// each single modality, then J+B, J+B+JM+BM, J+P, B+P, J+B+P and all five.
pub fn standard_rows(available: &[&str]) -> Vec<Vec<String>> {
    const ROWS: [&[&str]; 11] = [
        &["J"],
        &["B"],
        &["JM"],
        &["BM"],
        &["P"],
        &["J", "B"],
        &["J", "B", "JM", "BM"],
        &["J", "P"],
        &["B", "P"],
        &["J", "B", "P"],
        &["J", "B", "JM", "BM", "P"],
    ];
    ROWS.iter()
        .filter(|row| row.iter().all(|m| available.contains(m)))
        .map(|row| row.iter().map(|m| m.to_string()).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub weights: EnsembleWeights,
    pub metrics: Metrics,
}

pub fn format_report(rows: &[ReportRow], samples: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# test samples: {samples}");
    let _ = writeln!(out, "{:<16} {:<24} {:>8}", "modalities", "weights", "top1");
    for r in rows {
        let weights = r.weights.pairs().iter().map(|(_, w)| format!("{w}")).collect::<Vec<_>>().join(":");
        let _ = writeln!(out, "{:<16} {:<24} {:>8.4}", r.weights.label(), weights, r.metrics.top1 * 100.0);
    }
    out
}
