//! Frozen-teacher feature cache and per-class mean table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::nets::{forward_logits, predict, Model};
use crate::tensor::{l2_norm, Mat};

/// Teacher outputs for every training example, computed once in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub embeddings: Mat,
    pub norms: Vec<f64>,
    pub logits: Mat,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TeacherCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_accuracy(&self) -> f64 {
        let hits = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, l)| p == l)
            .count();
        hits as f64 / self.len().max(1) as f64
    }
}

pub fn extract_teacher_cache(teacher: &Model, data: &LabeledData) -> Result<TeacherCache> {
    if data.is_empty() {
        return Err(Error::Data("cannot build a teacher cache from an empty dataset".into()));
    }
    let embeddings = teacher.embed(&data.x)?;
    let logits = forward_logits(&teacher.params, &teacher.spec, &embeddings)?;
    Ok(TeacherCache {
        norms: embeddings.row_norms(),
        predictions: predict(&logits),
        embeddings,
        logits,
        labels: data.y.clone(),
        num_classes: data.num_classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Every training example of the class.
    #[default]
    All,
    /// Only examples the teacher classifies correctly.
    TeacherCorrect,
}

/// Class means `c_k`, their unit directions `e_k` and the number of examples
/// averaged for each class. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanTable {
    means: Mat,
    unit_dirs: Mat,
    counts: Vec<usize>,
    strategy: SelectionStrategy,
}

impl ClassMeanTable {
    pub fn means(&self) -> &Mat {
        &self.means
    }

    pub fn unit_dirs(&self) -> &Mat {
        &self.unit_dirs
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Builds a table straight from mean vectors (all counts set to 1).
    pub fn from_means(means: Mat) -> Result<Self> {
        let counts = vec![1; means.rows()];
        Self::assemble(means, counts, SelectionStrategy::All)
    }

    fn assemble(means: Mat, counts: Vec<usize>, strategy: SelectionStrategy) -> Result<Self> {
        let mut unit_dirs = means.clone();
        for k in 0..means.rows() {
            let norm = l2_norm(means.row(k));
            if !(norm > 0.0) {
                return Err(Error::Data(format!("class {k} mean has zero norm")));
            }
            for v in unit_dirs.row_mut(k) {
                *v /= norm;
            }
        }
        Ok(Self {
            means,
            unit_dirs,
            counts,
            strategy,
        })
    }

    /// CSV with header `class,count,dim_0,...,dim_{D-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count");
        for j in 0..self.dim() {
            write!(out, ",dim_{j}").unwrap();
        }
        out.push('\n');
        for k in 0..self.num_classes() {
            write!(out, "{k},{}", self.counts[k]).unwrap();
            for v in self.means.row(k) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class arithmetic means of the selected teacher embeddings.
///
/// Each coordinate is summed in sorted order, so the table does not depend
/// on the order of the examples.
pub fn build_class_means(cache: &TeacherCache, strategy: SelectionStrategy) -> Result<ClassMeanTable> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cache.num_classes];
    for (i, (&label, &pred)) in cache.labels.iter().zip(&cache.predictions).enumerate() {
        let keep = match strategy {
            SelectionStrategy::All => true,
            SelectionStrategy::TeacherCorrect => label == pred,
        };
        if keep {
            members[label].push(i);
        }
    }
    means_of_members(&cache.embeddings, &members, strategy)
}

/// Class means of arbitrary features, using every example.
pub fn class_means_of(features: &Mat, labels: &[usize], num_classes: usize) -> Result<ClassMeanTable> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        members[label].push(i);
    }
    means_of_members(features, &members, SelectionStrategy::All)
}

fn means_of_members(features: &Mat, members: &[Vec<usize>], strategy: SelectionStrategy) -> Result<ClassMeanTable> {
    let (c, d) = (members.len(), features.cols());
    let mut means = Mat::zeros(c, d);
    let mut counts = Vec::with_capacity(c);
    let mut column = Vec::new();
    for (k, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "class {k} has no selected examples under strategy {strategy:?}"
            )));
        }
        for j in 0..d {
            column.clear();
            column.extend(idx.iter().map(|&i| features.get(i, j)));
            column.sort_by(f64::total_cmp);
            let sum: f64 = column.iter().sum();
            means.set(k, j, sum / idx.len() as f64);
        }
        counts.push(idx.len());
    }
    ClassMeanTable::assemble(means, counts, strategy)
}
