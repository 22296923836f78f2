//! Teacher preparation, parallel distillation runs and trial summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::classmeans::{build_class_means, extract_teacher_cache, ClassMeanTable, TeacherCache};
use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::exp::config::ExperimentConfig;
use crate::losses::DistillConfig;
use crate::metrics::{MetricsRecord, Split};
use crate::nets::{MlpSpec, Model};
use crate::trainer::{distill, train_teacher, DistillOutcome};

/// Loaded data and the two network shapes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: LabeledData,
    pub test: LabeledData,
    pub teacher_spec: MlpSpec,
    pub student_spec: MlpSpec,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = cfg.load_data()?;
        let teacher_spec = cfg.teacher_spec(&train);
        let student_spec = cfg.student_spec(&train);
        teacher_spec.validate()?;
        student_spec.validate()?;
        Ok(Self {
            train,
            test,
            teacher_spec,
            student_spec,
        })
    }

    pub fn test_split(&self) -> Option<&LabeledData> {
        (!self.test.is_empty()).then_some(&self.test)
    }
}

/// A trained, frozen teacher with its cached outputs.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub model: Model,
    pub history: Vec<MetricsRecord>,
    pub cache: TeacherCache,
    pub means: ClassMeanTable,
}

impl TeacherBundle {
    pub fn from_model(model: Model, history: Vec<MetricsRecord>, data: &Prepared, cfg: &DistillConfig) -> Result<Self> {
        let cache = extract_teacher_cache(&model, &data.train)?;
        let means = build_class_means(&cache, cfg.class_means)?;
        Ok(Self {
            model,
            history,
            cache,
            means,
        })
    }
}

pub fn prepare_teacher(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<TeacherBundle> {
    let out = train_teacher(
        &data.teacher_spec,
        &data.train,
        data.test_split(),
        &cfg.teacher_train_for(seed),
    )?;
    TeacherBundle::from_model(out.model, out.history, data, &cfg.distill)
}

/// One teacher per distinct seed, trained in parallel.
pub fn prepare_teachers(
    cfg: &ExperimentConfig,
    data: &Prepared,
    seeds: &[u64],
) -> Result<BTreeMap<u64, TeacherBundle>> {
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    unique
        .par_iter()
        .map(|&s| {
            prepare_teacher(cfg, data, s)
                .map(|t| (s, t))
                .map_err(|e| context(e, &format!("teacher, seed {s}")))
        })
        .collect()
}

/// Adds the failing setting to an error message, keeping its kind.
pub fn context(e: Error, what: &str) -> Error {
    match e {
        Error::Divergence { epoch, step, detail } => Error::Divergence {
            epoch,
            step,
            detail: format!("{what}: {detail}"),
        },
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{what}: {m}")),
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        other => other,
    }
}

/// A named distillation setting. `keys` fill the command-specific leading
/// columns of the output table.
#[derive(Debug, Clone)]
pub struct Job {
    pub setting: String,
    pub keys: Vec<String>,
    pub distill: DistillConfig,
}

/// Final-epoch measurements of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalMetrics {
    pub top1: f64,
    pub mean_norm: f64,
    pub mean_angle_deg: f64,
}

/// Last test-split record, or the last train record without a test split.
pub fn final_metrics(history: &[MetricsRecord]) -> Result<FinalMetrics> {
    let last = history
        .iter()
        .rev()
        .find(|r| r.split == Split::Test)
        .or_else(|| history.last())
        .ok_or_else(|| Error::Config("run has no epochs to report".into()))?;
    Ok(FinalMetrics {
        top1: last.top1,
        mean_norm: last.mean_norm,
        mean_angle_deg: last.mean_angle_deg,
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub job: usize,
    pub seed: u64,
    pub outcome: DistillOutcome,
    pub metrics: FinalMetrics,
}

pub fn run_one(
    cfg: &ExperimentConfig,
    data: &Prepared,
    teacher: &TeacherBundle,
    distill_cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillOutcome> {
    distill(
        &teacher.model,
        &data.student_spec,
        &data.train,
        data.test_split(),
        &teacher.cache,
        &teacher.means,
        &cfg.student_train_for(seed),
        distill_cfg,
    )
}

/// Runs every job for every seed in parallel; results are ordered by job,
/// then by position in `seeds`.
pub fn run_jobs(
    cfg: &ExperimentConfig,
    data: &Prepared,
    teachers: &BTreeMap<u64, TeacherBundle>,
    jobs: &[Job],
    seeds: &[u64],
) -> Result<Vec<RunResult>> {
    let work: Vec<(usize, u64)> = (0..jobs.len())
        .flat_map(|j| seeds.iter().map(move |&s| (j, s)))
        .collect();
    work.par_iter()
        .map(|&(j, seed)| {
            let job = &jobs[j];
            let teacher = teachers
                .get(&seed)
                .ok_or_else(|| Error::Contract(format!("no teacher for seed {seed}")))?;
            let outcome = run_one(cfg, data, teacher, &job.distill, seed)
                .map_err(|e| context(e, &format!("setting {}, seed {seed}", job.setting)))?;
            let metrics = final_metrics(&outcome.history)?;
            Ok(RunResult {
                job: j,
                seed,
                outcome,
                metrics,
            })
        })
        .collect()
}

/// Mean and population standard deviation of the final metrics over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub setting: String,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub angle_mean: f64,
    pub angle_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(setting: &str, metrics: &[&FinalMetrics]) -> TrialSummary {
    let col = |f: fn(&FinalMetrics) -> f64| metrics.iter().map(|m| f(m)).collect::<Vec<_>>();
    let (top1_mean, top1_std) = mean_std(&col(|m| m.top1));
    let (norm_mean, norm_std) = mean_std(&col(|m| m.mean_norm));
    let (angle_mean, angle_std) = mean_std(&col(|m| m.mean_angle_deg));
    TrialSummary {
        setting: setting.to_string(),
        runs: metrics.len(),
        top1_mean,
        top1_std,
        norm_mean,
        norm_std,
        angle_mean,
        angle_std,
    }
}

pub fn summaries(jobs: &[Job], results: &[RunResult]) -> Vec<TrialSummary> {
    jobs.iter()
        .enumerate()
        .map(|(j, job)| {
            let ms: Vec<&FinalMetrics> = results.iter().filter(|r| r.job == j).map(|r| &r.metrics).collect();
            summarize(&job.setting, &ms)
        })
        .collect()
}

/// Result table with header
/// `kind,setting,<keys>,seed,top1,top1_std,mean_norm,mean_norm_std,mean_angle_deg,mean_angle_deg_std`.
/// `run` rows leave the std columns empty; `summary` rows leave `seed`
/// empty.
pub fn results_csv(key_header: &[&str], jobs: &[Job], results: &[RunResult], with_summaries: bool) -> String {
    let mut out = String::from("kind,setting");
    for k in key_header {
        write!(out, ",{k}").unwrap();
    }
    out.push_str(",seed,top1,top1_std,mean_norm,mean_norm_std,mean_angle_deg,mean_angle_deg_std\n");
    for r in results {
        let job = &jobs[r.job];
        write!(out, "run,{}", job.setting).unwrap();
        for k in &job.keys {
            write!(out, ",{k}").unwrap();
        }
        let m = &r.metrics;
        writeln!(out, ",{},{},,{},,{},", r.seed, m.top1, m.mean_norm, m.mean_angle_deg).unwrap();
    }
    if with_summaries {
        for (job, s) in jobs.iter().zip(summaries(jobs, results)) {
            write!(out, "summary,{}", job.setting).unwrap();
            for k in &job.keys {
                write!(out, ",{k}").unwrap();
            }
            writeln!(
                out,
                ",,{},{},{},{},{},{}",
                s.top1_mean, s.top1_std, s.norm_mean, s.norm_std, s.angle_mean, s.angle_std
            )
            .unwrap();
        }
    }
    out
}
