//! Accuracy, confusion matrices and prototype diagnostics.
//!
//! This is the only module that reads ground truth. The trainer reports
//! label-dependent metrics through [`LabelAudit`], which it sees only as an
//! [`EpochObserver`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::Adapter;
use crate::prototypes::{ImagePrototypes, TextualPrototypes};
use crate::store::{GroundTruth, TargetData};
use crate::trainer::{predict, EpochObserver, EpochView, LabelMetrics, TrainReport};

pub fn top1_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if p >= n_classes || t >= n_classes {
            return Err(Error::LabelOutOfRange {
                position: i,
                label: p.max(t),
                classes: n_classes,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Cosine similarity of every image prototype with every textual prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoCosine {
    pub matrix: Mat,
    pub diag_mean: f64,
    pub off_diag_mean: f64,
}

impl ProtoCosine {
    /// Mean diagonal minus mean off-diagonal similarity.
    pub fn dominance(&self) -> f64 {
        self.diag_mean - self.off_diag_mean
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.matrix.iter_rows() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn proto_cosine_matrix(p: &ImagePrototypes, z: &TextualPrototypes) -> Result<ProtoCosine> {
    let matrix = p.p.matmul_t(&z.z)?;
    let c = matrix.rows().min(matrix.cols());
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut n_off = 0usize;
    for i in 0..matrix.rows() {
        for j in 0..matrix.cols() {
            if i == j {
                diag += matrix.get(i, j);
            } else {
                off += matrix.get(i, j);
                n_off += 1;
            }
        }
    }
    Ok(ProtoCosine {
        matrix,
        diag_mean: if c > 0 { diag / c as f64 } else { 0.0 },
        off_diag_mean: if n_off > 0 { off / n_off as f64 } else { 0.0 },
    })
}

pub fn pl_accuracy_curve(report: &TrainReport) -> Result<Vec<(usize, f64)>> {
    report
        .records
        .iter()
        .map(|r| {
            r.pl_accuracy
                .map(|a| (r.epoch, a))
                .ok_or(Error::MissingLabels)
        })
        .collect()
}

/// Accuracy of the untrained textual prototypes on the weak views.
pub fn zero_shot_accuracy(data: &TargetData, truth: &GroundTruth) -> Result<f64> {
    let z = TextualPrototypes::from_prompts(data)?;
    let pred = predict(&z, &Adapter::identity(data.dim()), &data.weak_matrix())?;
    top1_accuracy(&pred, truth.labels())
}

/// Entropy (nats) of the mean predicted class distribution, from hard labels.
pub fn prediction_entropy(pred: &[usize], n_classes: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hist = vec![0usize; n_classes];
    for (i, &p) in pred.iter().enumerate() {
        if p >= n_classes {
            return Err(Error::LabelOutOfRange {
                position: i,
                label: p,
                classes: n_classes,
            });
        }
        hist[p] += 1;
    }
    let n = pred.len() as f64;
    Ok(-hist
        .iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let q = h as f64 / n;
            q * q.ln()
        })
        .sum::<f64>())
}

/// Entropy (nats) of the column mean of `softmax(adapter(rows)·Zᵀ/τ)`.
pub fn mean_prediction_entropy(
    z: &TextualPrototypes,
    adapter: &Adapter,
    rows: &Mat,
    tau_logit: f64,
) -> Result<f64> {
    if rows.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if tau_logit.is_nan() || tau_logit <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau_logit));
    }
    let probs = adapter.apply(rows)?.matmul_t(&z.z)?.softmax_rows(tau_logit);
    let mut mean = vec![0.0; probs.cols()];
    for row in probs.iter_rows() {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    let n = probs.rows() as f64;
    Ok(-mean
        .iter()
        .map(|m| m / n)
        .filter(|&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>())
}

/// Supplies pseudo-label and test accuracy to the trainer each epoch.
pub struct LabelAudit<'a> {
    truth: &'a GroundTruth,
}

impl<'a> LabelAudit<'a> {
    pub fn new(truth: &'a GroundTruth) -> Self {
        Self { truth }
    }
}

impl EpochObserver for LabelAudit<'_> {
    fn label_metrics(&mut self, view: &EpochView<'_>) -> Result<LabelMetrics> {
        let pl = top1_accuracy(view.pseudo_labels, self.truth.labels())?;
        let pred = predict(view.z, view.adapter, &view.data.weak_matrix())?;
        let test = top1_accuracy(&pred, self.truth.labels())?;
        Ok(LabelMetrics {
            pl_accuracy: Some(pl),
            test_accuracy: Some(test),
        })
    }
}

/// Per-epoch curves in a shape plotting tools can read directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub epoch: Vec<usize>,
    pub total_loss: Vec<f64>,
    pub pl_accuracy: Vec<Option<f64>>,
    pub test_accuracy: Vec<Option<f64>>,
    pub mean_diag_proto_cosine: Vec<f64>,
}

impl From<&TrainReport> for Curves {
    fn from(r: &TrainReport) -> Self {
        Self {
            epoch: r.records.iter().map(|x| x.epoch).collect(),
            total_loss: r.records.iter().map(|x| x.total).collect(),
            pl_accuracy: r.records.iter().map(|x| x.pl_accuracy).collect(),
            test_accuracy: r.records.iter().map(|x| x.test_accuracy).collect(),
            mean_diag_proto_cosine: r.records.iter().map(|x| x.mean_diag_proto_cosine).collect(),
        }
    }
}
