use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pre-softmax class scores, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub modality: String,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `[samples, K]`
    pub scores: Tensor<f32>,
}

/// Row-wise argmax; ties resolve to the smallest index.
pub fn argmax_rows<S: Scalar>(scores: &Tensor<S>) -> Vec<usize> {
    let k = scores.shape()[scores.rank() - 1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl ScoreMatrix {
    pub fn new(
        modality: impl Into<String>,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        scores: Tensor<f32>,
    ) -> Result<Self> {
        if scores.rank() != 2 || scores.shape()[0] != sample_ids.len() {
            return Err(Error::shape("score matrix", format!("{:?} for {} samples", scores.shape(), sample_ids.len())));
        }
        if labels.len() != sample_ids.len() {
            return Err(Error::LengthMismatch { left: sample_ids.len(), right: labels.len() });
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("class scores"));
        }
        Ok(Self { modality: modality.into(), sample_ids, labels, scores })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.classes();
        &self.scores.data()[i * k..(i + 1) * k]
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.scores)
    }

    /// `sample_id,label,score_0,...` with 9 significant digits, which round-trips `f32` exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,label");
        for k in 0..self.classes() {
            let _ = write!(out, ",score_{k}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},{}", self.sample_ids[i], self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, modality: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "score csv", detail };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let k = cols.len() - 2;
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != k + 2 {
                return Err(bad(format!("row {} has {} fields, expected {}", n + 1, fields.len(), k + 2)));
            }
            ids.push(fields[0].to_string());
            labels.push(fields[1].parse().map_err(|_| bad(format!("row {}: bad label", n + 1)))?);
            for f in &fields[2..] {
                data.push(f.parse::<f32>().map_err(|_| bad(format!("row {}: bad score {f:?}", n + 1)))?);
            }
        }
        let scores = Tensor::new(vec![ids.len(), k], data)?;
        Self::new(modality, ids, labels, scores)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, modality: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, modality)
    }
}
