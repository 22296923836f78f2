//! Experiment protocols built on [`run_jobs`].

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exp::config::ExperimentConfig;
use crate::exp::runner::{
    prepare_teachers, results_csv, run_jobs, summaries, Job, Prepared, RunResult, TeacherBundle, TrialSummary,
};
use crate::losses::{DirectionReg, DistillConfig, KdVariant, NormReg, RegVariant};

/// Output of a protocol: the result table plus the raw runs.
pub struct ProtocolOutput {
    pub jobs: Vec<Job>,
    pub results: Vec<RunResult>,
    pub csv: String,
}

fn execute(
    cfg: &ExperimentConfig,
    data: &Prepared,
    seeds: &[u64],
    jobs: Vec<Job>,
    key_header: &[&str],
    with_summaries: bool,
) -> Result<ProtocolOutput> {
    let teachers = prepare_teachers(cfg, data, seeds)?;
    execute_with(cfg, data, &teachers, seeds, jobs, key_header, with_summaries)
}

fn execute_with(
    cfg: &ExperimentConfig,
    data: &Prepared,
    teachers: &BTreeMap<u64, TeacherBundle>,
    seeds: &[u64],
    jobs: Vec<Job>,
    key_header: &[&str],
    with_summaries: bool,
) -> Result<ProtocolOutput> {
    let results = run_jobs(cfg, data, teachers, &jobs, seeds)?;
    let csv = results_csv(key_header, &jobs, &results, with_summaries);
    Ok(ProtocolOutput { jobs, results, csv })
}

/// The twelve ablation settings as `(name, kd, use_ce, reg)`.
pub fn ablation_settings() -> Vec<(&'static str, KdVariant, bool, RegVariant)> {
    use DirectionReg::{Cosine, InfoNce};
    use NormReg::{Sifn, L2};
    let kl = KdVariant::Kl;
    vec![
        ("ce+kl", kl, true, RegVariant::None),
        ("ce+kl+l2", kl, true, RegVariant::L2),
        ("ce+kl+sifn", kl, true, RegVariant::Sifn),
        ("ce+kl+cosine", kl, true, RegVariant::Cosine),
        ("ce+kl+infonce", kl, true, RegVariant::InfoNce),
        ("ce+kl+cosine+l2", kl, true, RegVariant::Combined(Cosine, L2)),
        ("ce+kl+cosine+sifn", kl, true, RegVariant::Combined(Cosine, Sifn)),
        ("ce+kl+infonce+l2", kl, true, RegVariant::Combined(InfoNce, L2)),
        ("ce+kl+infonce+sifn", kl, true, RegVariant::Combined(InfoNce, Sifn)),
        ("ce+nd", KdVariant::None, true, RegVariant::Nd),
        ("kl+nd", kl, false, RegVariant::Nd),
        ("ce+kl+nd", kl, true, RegVariant::Nd),
    ]
}

pub fn ablation_jobs(base: &DistillConfig) -> Vec<Job> {
    ablation_settings()
        .into_iter()
        .map(|(name, kd, use_ce, reg)| Job {
            setting: name.to_string(),
            keys: vec![],
            distill: DistillConfig {
                kd,
                use_ce,
                reg,
                m: if reg == RegVariant::Nd { base.m } else { 0.0 },
                ..base.clone()
            },
        })
        .collect()
}

/// Sidecar describing how the ablation was weighted.
#[derive(Debug, Clone, Serialize)]
pub struct AblationMeta {
    pub settings: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub combined_subweights: String,
    pub seeds: Vec<u64>,
}

pub fn ablation(cfg: &ExperimentConfig, data: &Prepared, seeds: &[u64]) -> Result<(ProtocolOutput, AblationMeta)> {
    let jobs = ablation_jobs(&cfg.distill);
    let meta = AblationMeta {
        settings: jobs.iter().map(|j| j.setting.clone()).collect(),
        alpha: cfg.distill.alpha,
        beta: cfg.distill.beta,
        tau: cfg.distill.tau,
        combined_subweights: "norm+direction combinations weight each sub-term by beta/2".into(),
        seeds: seeds.to_vec(),
    };
    Ok((execute(cfg, data, seeds, jobs, &[], true)?, meta))
}

/// Index of the best entry by mean top-1; ties go to the smaller β.
pub fn select_best_beta(betas: &[f64], mean_top1: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..betas.len() {
        best = match best {
            None => Some(i),
            Some(b) if mean_top1[i] > mean_top1[b] => Some(i),
            Some(b) if mean_top1[i] == mean_top1[b] && betas[i] < betas[b] => Some(i),
            keep => keep,
        };
    }
    best
}

pub struct SensitivityOutput {
    pub stage1: ProtocolOutput,
    pub stage2: ProtocolOutput,
    pub stage1_summaries: Vec<TrialSummary>,
    pub best_beta: f64,
    pub csv: String,
}

fn grid_job(setting: String, stage: &str, alpha: f64, beta: f64, base: &DistillConfig) -> Job {
    Job {
        setting,
        keys: vec![stage.to_string(), alpha.to_string(), beta.to_string()],
        distill: DistillConfig {
            alpha,
            beta,
            ..base.clone()
        },
    }
}

/// Two stages: β sweep at α = 1, then α sweep at the best β.
pub fn sensitivity(
    cfg: &ExperimentConfig,
    data: &Prepared,
    seeds: &[u64],
    beta_grid: &[f64],
    alpha_grid: &[f64],
) -> Result<SensitivityOutput> {
    if beta_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::Config("sensitivity grids must be non-empty".into()));
    }
    let header = ["stage", "alpha", "beta"];
    let stage1_jobs: Vec<Job> = beta_grid
        .iter()
        .map(|&b| grid_job(format!("beta={b}"), "1", 1.0, b, &cfg.distill))
        .collect();
    let teachers = prepare_teachers(cfg, data, seeds)?;
    let stage1 = execute_with(cfg, data, &teachers, seeds, stage1_jobs, &header, true)?;
    let stage1_summaries = summaries(&stage1.jobs, &stage1.results);
    let means: Vec<f64> = stage1_summaries.iter().map(|s| s.top1_mean).collect();
    let best = select_best_beta(beta_grid, &means).expect("grid is non-empty");
    let best_beta = beta_grid[best];
    let stage2_jobs: Vec<Job> = alpha_grid
        .iter()
        .map(|&a| grid_job(format!("alpha={a}"), "2", a, best_beta, &cfg.distill))
        .collect();
    let stage2 = execute_with(cfg, data, &teachers, seeds, stage2_jobs, &header, true)?;
    let body2: String = stage2.csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let csv = format!("{}{body2}", stage1.csv);
    Ok(SensitivityOutput {
        stage1,
        stage2,
        stage1_summaries,
        best_beta,
        csv,
    })
}

pub fn msweep(cfg: &ExperimentConfig, data: &Prepared, seeds: &[u64], m_values: &[f64]) -> Result<ProtocolOutput> {
    if let Some(m) = m_values.iter().find(|m| !(**m > -1.0) || !m.is_finite()) {
        return Err(Error::Config(format!("m must be > -1, got {m}")));
    }
    let jobs = m_values
        .iter()
        .map(|&m| Job {
            setting: format!("m={m}"),
            keys: vec![m.to_string()],
            distill: DistillConfig {
                reg: RegVariant::Nd,
                m,
                ..cfg.distill.clone()
            },
        })
        .collect();
    execute(cfg, data, seeds, jobs, &["m"], true)
}

/// SIFN-only distillation for each step size `r`; one row per run.
pub fn sifn_sweep(cfg: &ExperimentConfig, data: &Prepared, seeds: &[u64], r_values: &[f64]) -> Result<ProtocolOutput> {
    if let Some(r) = r_values.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("sifn r must be > 0, got {r}")));
    }
    let jobs = r_values
        .iter()
        .map(|&r| Job {
            setting: format!("r={r}"),
            keys: vec![r.to_string()],
            distill: DistillConfig {
                reg: RegVariant::Sifn,
                sifn_r: r,
                m: 0.0,
                ..cfg.distill.clone()
            },
        })
        .collect();
    execute(cfg, data, seeds, jobs, &["r"], false)
}

/// The configured distillation repeated over at least two seeds.
pub fn trials(cfg: &ExperimentConfig, data: &Prepared, seeds: &[u64]) -> Result<ProtocolOutput> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "trials need at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let jobs = vec![Job {
        setting: "configured".into(),
        keys: vec![],
        distill: cfg.distill.clone(),
    }];
    execute(cfg, data, seeds, jobs, &[], true)
}
