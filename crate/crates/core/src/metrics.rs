//! Evaluation measurements: top-1 accuracy, feature norms and angular
//! alignment with class means.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::classmeans::ClassMeanTable;
use crate::error::{Error, Result};
use crate::nets::predict;
use crate::tensor::{dot, l2_norm, Mat};

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1(logits: &Mat, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Statistics of the row L2 norms. `std` is the population standard
/// deviation.
pub fn norm_stats(f: &Mat) -> Result<NormStats> {
    if f.rows() == 0 {
        return Err(Error::Data("norm_stats of an empty matrix".into()));
    }
    let norms = f.row_norms();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(NormStats {
        mean,
        std: var.sqrt(),
        min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Mean angle in degrees between each row and the mean of its class.
pub fn angle_stats(f: &Mat, table: &ClassMeanTable, labels: &[usize]) -> Result<f64> {
    if f.rows() != labels.len() || f.cols() != table.dim() {
        return Err(Error::Shape {
            op: "angle_stats",
            left: f.shape(),
            right: table.means().shape(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Data("angle_stats of an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = f.row(i);
        let norm = l2_norm(row);
        if !(norm > 0.0) {
            return Err(Error::Singularity {
                index: i,
                what: "feature in angle_stats",
            });
        }
        let cos = (dot(row, table.unit_dirs().row(y)) / norm).clamp(-1.0, 1.0);
        total += cos.acos().to_degrees();
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One epoch's scalars for one split.
///
/// `mean_norm` and `mean_angle_deg` are measured on the features the
/// regularizers see (the adapted embedding when an adapter is in use).
/// Distillation-only terms are `None` on the test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_ce: f64,
    pub loss_kd: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_total: f64,
    pub top1: f64,
    pub mean_norm: f64,
    pub mean_angle_deg: f64,
    pub lr: f64,
    pub seconds_per_iter: f64,
}

impl MetricsRecord {
    /// Copy with the wall-clock column zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds_per_iter: 0.0,
            ..self.clone()
        }
    }
}

pub const METRICS_HEADER: &str =
    "epoch,split,loss_ce,loss_kd,loss_reg,loss_total,top1,mean_norm,mean_angle_deg,lr,seconds_per_iter";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders a metrics history as CSV. With `timing = false` the
/// `seconds_per_iter` column is written as 0 so reruns are byte-identical.
pub fn metrics_csv(records: &[MetricsRecord], timing: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let secs = if timing { r.seconds_per_iter } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            r.loss_ce,
            opt(r.loss_kd),
            opt(r.loss_reg),
            r.loss_total,
            r.top1,
            r.mean_norm,
            r.mean_angle_deg,
            r.lr,
            secs
        )
        .unwrap();
    }
    out
}
