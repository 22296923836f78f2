//! Synthetic Gaussian-mixture datasets and a small CSV format.
//!
//! CSV rows are `label,x_0,...,x_{D-1}` with no header. Loading tolerates a
//! single header line when asked to.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Normal, Stream};
use crate::tensor::Mat;

/// Features plus labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: Mat,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn new(x: Mat, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape {
                op: "LabeledData",
                left: x.shape(),
                right: (y.len(), 1),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Errors unless every class appears at least once.
    pub fn require_all_classes(&self) -> Result<()> {
        if let Some(k) = self.class_counts().iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("class {k} has no examples in the training split")));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Radius of the sphere the class centers are drawn on.
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("mixture needs at least 2 classes".into()));
        }
        if self.dim == 0 || self.n_per_class == 0 {
            return Err(Error::Config("mixture dim and n_per_class must be >= 1".into()));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!(
                "separation must be >= 0, got {}",
                self.separation
            )));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be > 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Number of training examples per class in the stratified 80/20 split.
    pub fn train_per_class(&self) -> usize {
        (4 * self.n_per_class).div_ceil(5)
    }
}

/// Draws the class centers: Gaussian directions scaled to `separation`.
pub fn mixture_centers(spec: &MixtureSpec) -> Result<Mat> {
    spec.validate()?;
    let mut normal = Normal::new(seeded(spec.seed, Stream::Data));
    let mut centers = Mat::zeros(spec.classes, spec.dim);
    for k in 0..spec.classes {
        let row = centers.row_mut(k);
        let mut norm = 0.0;
        while norm == 0.0 {
            for v in row.iter_mut() {
                *v = normal.sample();
            }
            norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        for v in row.iter_mut() {
            *v *= spec.separation / norm;
        }
    }
    Ok(centers)
}

/// Generates the mixture and splits it 80/20 per class. Both splits are
/// ordered class-major.
pub fn make_mixture(spec: &MixtureSpec) -> Result<(LabeledData, LabeledData)> {
    let centers = mixture_centers(spec)?;
    // the noise stream continues after the centers so both depend only on seed
    let mut normal = Normal::new(seeded(spec.seed, Stream::Data));
    for _ in 0..centers.data().len() {
        normal.sample();
    }
    let n_train = spec.train_per_class();
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for k in 0..spec.classes {
        for j in 0..spec.n_per_class {
            let (xs, ys) = if j < n_train { &mut train } else { &mut test };
            for &c in centers.row(k) {
                xs.push(c + spec.noise_std * normal.sample());
            }
            ys.push(k);
        }
    }
    let make = |(xs, ys): (Vec<f64>, Vec<usize>)| -> Result<LabeledData> {
        let n = ys.len();
        LabeledData::new(Mat::from_vec(n, spec.dim, xs)?, ys, spec.classes)
    };
    Ok((make(train)?, make(test)?))
}

/// Parses the CSV format. `num_classes` is one more than the largest label
/// seen.
pub fn parse_csv(text: &str, header: bool) -> Result<LabeledData> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if header && idx == 0 {
            continue;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected a label followed by at least one feature".into(),
            });
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {expected} features, found {d}"),
                })
            }
            _ => {}
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label `{}`", fields[0]),
        })?;
        ys.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad number `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            xs.push(v);
        }
    }
    let dim = dim.ok_or_else(|| Error::Data("csv contains no rows".into()))?;
    let num_classes = ys.iter().copied().max().map_or(0, |m| m + 1);
    let n = ys.len();
    LabeledData::new(Mat::from_vec(n, dim, xs)?, ys, num_classes)
}

pub fn load_csv(path: &Path, header: bool) -> Result<LabeledData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, header)
}

/// Loads a training split and checks that every class is present.
pub fn load_train_csv(path: &Path, header: bool) -> Result<LabeledData> {
    let data = load_csv(path, header)?;
    data.require_all_classes()?;
    Ok(data)
}

/// Renders the CSV format. Values use the shortest representation that
/// parses back to the same bits.
pub fn to_csv(data: &LabeledData) -> String {
    let mut out = String::new();
    for (row, &label) in data.x.iter_rows().zip(&data.y) {
        write!(out, "{label}").unwrap();
        for v in row {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(data: &LabeledData, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(data)).map_err(|e| Error::io(path, e))
}
