//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs the full desk-scale recipe, so build with optimizations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndlab::classmeans::{build_class_means, ClassMeanTable, SelectionStrategy, TeacherCache};
use ndlab::data::{load_csv, make_mixture, save_csv};
use ndlab::exp::config::DataSource;
use ndlab::exp::gradsuite::{run_suite, GRADCHECK_TOL};
use ndlab::exp::plot::parse_embeddings;
use ndlab::exp::protocols::{ablation, msweep, select_best_beta, sensitivity, sifn_sweep};
use ndlab::exp::runner::{prepare_teachers, run_one, summaries, Prepared, RunResult};
use ndlab::exp::ExperimentConfig;
use ndlab::losses::{kd_kl_loss, nd_example, nd_loss, DistillConfig, NdRegime, RegVariant};
use ndlab::metrics::{MetricsRecord, Split};
use ndlab::nets::Model;
use ndlab::trainer::train_teacher;
use ndlab::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

fn ok_or<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Check {
    let start = Instant::now();
    let reports = ok_or(run_suite(false))?;
    let secs = start.elapsed().as_secs_f64();
    let required = [
        "ce",
        "kl",
        "l2_feature",
        "sifn",
        "cosine",
        "infonce",
        "nd",
        "nd_scaled",
        "affine",
        "relu",
        "batchnorm",
    ];
    for name in required {
        ensure!(reports.iter().any(|r| r.name == name), "suite has no `{name}` check");
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or("empty suite")?;
    ensure!(
        reports.iter().all(|r| r.report.max_rel_error < GRADCHECK_TOL),
        "{} has rel err {:.3e}",
        worst.name,
        worst.report.max_rel_error
    );
    ensure!(secs < 10.0, "suite took {secs:.2}s");
    Ok(format!(
        "{} checks, worst {:.2e} ({}), {secs:.3}s",
        reports.len(),
        worst.report.max_rel_error,
        worst.name
    ))
}

fn nd_analytic_values() -> Check {
    let table = ok_or(ClassMeanTable::from_means(ok_or(Mat::from_rows(&[
        [1.0, 0.0],
        [0.0, 1.0],
    ]))?))?;
    let cases: [([f64; 2], f64, [f64; 2]); 3] = [
        ([1.0, 0.0], -0.5, [-0.5, 0.0]),
        ([3.0, 0.0], -1.0, [0.0, 0.0]),
        ([0.0, 1.0], 0.0, [-0.5, 0.0]),
    ];
    for (f, want, want_grad) in cases {
        let fs = ok_or(Mat::from_rows(&[f]))?;
        let (out, _) = ok_or(nd_loss(&fs, &[2.0], &table, &[0], 0.0))?;
        ensure!((out.value - want).abs() < 1e-12, "f = {f:?}: {} != {want}", out.value);
        if f == [0.0, 1.0] || f == [1.0, 0.0] {
            for (g, w) in out.grad.data().iter().zip(want_grad) {
                ensure!((g - w).abs() < 1e-12, "f = {f:?}: grad {:?}", out.grad.data());
            }
        }
    }

    let mut r = rng(21);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let d = r.random_range(1..8);
        let f = rand_vec(&mut r, d, 10.0);
        let e = unit(&rand_vec(&mut r, d, 1.0));
        let m = r.random_range(-0.9..2.0);
        let tn = r.random_range(1e-3..20.0);
        let v = nd_example(&f, &e, (1.0 + m) * tn).value;
        ensure!((-1.0..=1.0).contains(&v), "value {v} outside [-1, 1]");
        lo = lo.min(v);
        hi = hi.max(v);
    }

    // -1 exactly when aligned with norm at or above the scaled teacher norm
    for _ in 0..1000 {
        let d = r.random_range(2..6);
        let e = unit(&rand_vec(&mut r, d, 1.0));
        let m = r.random_range(-0.9..2.0);
        let tn = r.random_range(0.1..5.0);
        let scaled = (1.0 + m) * tn;
        let lambda = scaled * r.random_range(1.0..4.0);
        let f: Vec<f64> = e.iter().map(|x| lambda * x).collect();
        let v = nd_example(&f, &e, scaled).value;
        ensure!((v + 1.0).abs() < 1e-12, "aligned long f gives {v}");
        let at_boundary: Vec<f64> = e.iter().map(|x| scaled * x).collect();
        let v = nd_example(&at_boundary, &e, scaled).value;
        ensure!((v + 1.0).abs() < 1e-12, "aligned f at the boundary gives {v}");

        let short: Vec<f64> = e.iter().map(|x| 0.9 * scaled * x).collect();
        let v = nd_example(&short, &e, scaled).value;
        ensure!(v > -1.0 + 1e-6, "aligned short f reaches {v}");
        let mut tilted = f.clone();
        tilted[0] += 0.5 * lambda;
        tilted[1] -= 0.5 * lambda;
        let v = nd_example(&tilted, &e, scaled).value;
        ensure!(v > -1.0 + 1e-6, "misaligned long f reaches {v}");
    }
    Ok(format!(
        "3 hand cases; 10k values in [{lo:.4}, {hi:.4}]; -1 iff aligned and long"
    ))
}

fn regime_geometry() -> Check {
    let mut r = rng(31);
    let mut worst_orth: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for _ in 0..1000 {
        let d = r.random_range(2..10);
        let f = rand_vec(&mut r, d, 5.0);
        let e = unit(&rand_vec(&mut r, d, 1.0));
        let m = r.random_range(-0.9..2.0);
        let tn = norm(&f) * r.random_range(0.05..0.95) / (1.0 + m);
        let ex = nd_example(&f, &e, (1.0 + m) * tn);
        ensure!(ex.regime == NdRegime::LargeNorm, "expected the large-norm regime");
        let inner: f64 = ex.grad.iter().zip(&f).map(|(g, x)| g * x).sum();
        let orth = (inner / (norm(&ex.grad) * norm(&f))).abs();
        worst_orth = worst_orth.max(orth);
        ensure!(orth < 1e-10, "normalized inner product {orth:e}");
        let lambda = r.random_range(1.0..100.0);
        let scaled: Vec<f64> = f.iter().map(|x| lambda * x).collect();
        let diff = (nd_example(&scaled, &e, (1.0 + m) * tn).value - ex.value).abs();
        worst_scale = worst_scale.max(diff);
        ensure!(diff < 1e-12, "scaling by {lambda} moved the value by {diff:e}");
    }
    for _ in 0..1000 {
        let d = r.random_range(2..10);
        let f = rand_vec(&mut r, d, 5.0);
        let e = unit(&rand_vec(&mut r, d, 1.0));
        let m = r.random_range(-0.9..2.0);
        let tn = norm(&f) * r.random_range(1.01..20.0) / (1.0 + m);
        let ex = nd_example(&f, &e, (1.0 + m) * tn);
        ensure!(ex.regime == NdRegime::SmallNorm, "expected the small-norm regime");
        for (g, ej) in ex.grad.iter().zip(&e) {
            let want = -ej / ((1.0 + m) * tn);
            ensure!(g.to_bits() == want.to_bits(), "small-norm grad {g} != {want}");
        }
    }
    Ok(format!(
        "large-norm: max |cos(grad, f)| {worst_orth:.1e}, max scale drift {worst_scale:.1e}; small-norm grad exact"
    ))
}

/// Unscaled ND written out directly: class-balanced mean of
/// `−(f·e)/max(‖f‖, ‖f^t‖)` and its gradient.
fn nd_unscaled_oracle(f: &Mat, tn: &[f64], e: &Mat, labels: &[usize]) -> (f64, Vec<f64>) {
    let classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut value = 0.0;
    let mut grad = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let w = 1.0 / (present * counts[y] as f64);
        let fi = f.row(i);
        let ei = e.row(y);
        let proj: f64 = fi.iter().zip(ei).map(|(a, b)| a * b).sum();
        let n = fi.iter().zip(fi).map(|(a, b)| a * b).sum::<f64>().sqrt();
        let den = n.max(tn[i]);
        value += w * (-proj / den);
        for (fj, ej) in fi.iter().zip(ei) {
            let g = if n > tn[i] {
                -(ej - proj * fj / (n * n)) / n
            } else {
                -ej / tn[i]
            };
            grad.push(w * g);
        }
    }
    (value, grad)
}

fn same_history(a: &[MetricsRecord], b: &[MetricsRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.without_timing() == y.without_timing())
}

fn reductions(cfg: &ExperimentConfig, data: &Prepared) -> Check {
    let mut r = rng(41);
    for _ in 0..200 {
        let n = r.random_range(2..16);
        let d = r.random_range(2..6);
        let c = r.random_range(2..5);
        let f = ok_or(Mat::from_vec(n, d, rand_vec(&mut r, n * d, 3.0)))?;
        let means = ok_or(Mat::from_vec(c, d, rand_vec(&mut r, c * d, 2.0)))?;
        let table = ok_or(ClassMeanTable::from_means(means))?;
        let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { r.random_range(0..c) }).collect();
        let tn: Vec<f64> = (0..n).map(|_| r.random_range(0.1..4.0)).collect();
        let (out, _) = ok_or(nd_loss(&f, &tn, &table, &labels, 0.0))?;
        let (value, grad) = nd_unscaled_oracle(&f, &tn, table.unit_dirs(), &labels);
        ensure!(
            out.value.to_bits() == value.to_bits(),
            "m=0 value {} != {value}",
            out.value
        );
        ensure!(
            out.grad
                .data()
                .iter()
                .zip(&grad)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "m=0 gradient differs from the unscaled loss"
        );
        let z = ok_or(Mat::from_vec(n, c, rand_vec(&mut r, n * c, 8.0)))?;
        let kl = ok_or(kd_kl_loss(&z, &z, r.random_range(0.5..8.0)))?;
        ensure!(kl.value == 0.0, "KL(z, z) = {}", kl.value);
    }

    let seed = cfg.seeds[0];
    let teachers = ok_or(prepare_teachers(cfg, data, &[seed]))?;
    let teacher = &teachers[&seed];
    let run = |d: &DistillConfig| ok_or(run_one(cfg, data, teacher, d, seed));
    let zero_beta = run(&DistillConfig {
        beta: 0.0,
        ..cfg.distill.clone()
    })?;
    let kd_only = run(&DistillConfig {
        reg: RegVariant::None,
        ..cfg.distill.clone()
    })?;
    ensure!(
        zero_beta.student.to_bytes() == kd_only.student.to_bytes(),
        "beta=0 student differs from plain KD"
    );
    ensure!(
        same_history(&zero_beta.history, &kd_only.history),
        "beta=0 metrics differ from plain KD"
    );

    let none = run(&DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        ..cfg.distill.clone()
    })?;
    let ce_only = ok_or(train_teacher(
        &data.student_spec,
        &data.train,
        data.test_split(),
        &cfg.student_train_for(seed),
    ))?;
    ensure!(
        none.student.to_bytes() == ce_only.model.to_bytes(),
        "alpha=beta=0 student differs from CE-only"
    );
    for (a, b) in none.history.iter().zip(&ce_only.history) {
        ensure!(
            a.loss_ce.to_bits() == b.loss_ce.to_bits() && a.top1.to_bits() == b.top1.to_bits(),
            "alpha=beta=0 metrics differ from CE-only at epoch {}",
            a.epoch
        );
    }
    Ok("m=0 == unscaled ND bitwise (200 batches); KL(z,z)=0; beta=0 == KD; alpha=beta=0 == CE-only".into())
}

fn class_mean_oracle(cfg: &ExperimentConfig, data: &Prepared) -> Check {
    let seed = cfg.seeds[0];
    let teachers = ok_or(prepare_teachers(cfg, data, &[seed]))?;
    let cache = &teachers[&seed].cache;
    let mut worst: f64 = 0.0;
    for strategy in [SelectionStrategy::All, SelectionStrategy::TeacherCorrect] {
        let table = ok_or(build_class_means(cache, strategy))?;
        for k in 0..cache.num_classes {
            let rows: Vec<usize> = (0..cache.len())
                .filter(|&i| cache.labels[i] == k && (strategy == SelectionStrategy::All || cache.predictions[i] == k))
                .collect();
            ensure!(table.counts()[k] == rows.len(), "class {k} count");
            for j in 0..table.dim() {
                let mean = rows.iter().map(|&i| cache.embeddings.get(i, j)).sum::<f64>() / rows.len() as f64;
                let diff = (mean - table.means().get(k, j)).abs();
                worst = worst.max(diff);
                ensure!(diff < 1e-12, "class {k} dim {j}: off by {diff:e}");
            }
            let n = norm(table.unit_dirs().row(k));
            ensure!((n - 1.0).abs() < 1e-10, "unit direction {k} has norm {n}");
        }

        let mut perm: Vec<usize> = (0..cache.len()).collect();
        let mut r = rng(51);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let shuffled = TeacherCache {
            embeddings: cache.embeddings.select_rows(&perm),
            norms: perm.iter().map(|&i| cache.norms[i]).collect(),
            logits: cache.logits.select_rows(&perm),
            predictions: perm.iter().map(|&i| cache.predictions[i]).collect(),
            labels: perm.iter().map(|&i| cache.labels[i]).collect(),
            num_classes: cache.num_classes,
        };
        let again = ok_or(build_class_means(&shuffled, strategy))?;
        ensure!(again.means() == table.means(), "means depend on example order");
    }
    Ok(format!(
        "max deviation from brute force {worst:.1e}; order-invariant; unit norms within 1e-10"
    ))
}

fn by_setting<'a>(results: &'a [RunResult], jobs: &[ndlab::exp::runner::Job], name: &str) -> Vec<&'a RunResult> {
    results.iter().filter(|r| jobs[r.job].setting == name).collect()
}

fn distillation_study(
    cfg: &ExperimentConfig,
    data: &Prepared,
    ablation_out: &ndlab::exp::protocols::ProtocolOutput,
) -> Check {
    let teachers = ok_or(prepare_teachers(cfg, data, &cfg.seeds))?;
    let mut teacher_top1 = Vec::new();
    for (seed, t) in &teachers {
        let last = t
            .history
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .ok_or("teacher has no test record")?;
        ensure!(last.top1 >= 0.99, "teacher seed {seed}: test top-1 {}", last.top1);
        teacher_top1.push(last.top1);
    }
    let base = by_setting(&ablation_out.results, &ablation_out.jobs, "ce+kl");
    let nd = by_setting(&ablation_out.results, &ablation_out.jobs, "ce+kl+nd");
    ensure!(
        base.len() == cfg.seeds.len() && nd.len() == cfg.seeds.len(),
        "missing runs"
    );
    let mut norm_wins = 0;
    let mut angle_wins = 0;
    for (b, n) in base.iter().zip(&nd) {
        ensure!(b.seed == n.seed, "seed mismatch");
        if n.metrics.mean_norm > b.metrics.mean_norm {
            norm_wins += 1;
        }
        if n.metrics.mean_angle_deg < b.metrics.mean_angle_deg {
            angle_wins += 1;
        }
    }
    let mean = |rs: &[&RunResult], f: fn(&RunResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let top1_base = mean(&base, |r| r.metrics.top1);
    let top1_nd = mean(&nd, |r| r.metrics.top1);
    let detail = format!(
        "teacher top-1 min {:.4}; norm {:.2} -> {:.2} ({norm_wins}/5); angle {:.1} -> {:.1} ({angle_wins}/5); top-1 {:.4} vs {:.4}",
        teacher_top1.iter().cloned().fold(f64::INFINITY, f64::min),
        mean(&base, |r| r.metrics.mean_norm),
        mean(&nd, |r| r.metrics.mean_norm),
        mean(&base, |r| r.metrics.mean_angle_deg),
        mean(&nd, |r| r.metrics.mean_angle_deg),
        top1_nd,
        top1_base,
    );
    ensure!(norm_wins >= 4, "norm increased in only {norm_wins}/5 seeds: {detail}");
    ensure!(
        angle_wins >= 4,
        "angle decreased in only {angle_wins}/5 seeds: {detail}"
    );
    ensure!(top1_nd >= top1_base - 0.002, "top-1 dropped: {detail}");
    Ok(detail)
}

/// Spearman rank correlation; ties get their average rank.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                out[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn sifn_monotonicity(cfg: &ExperimentConfig, data: &Prepared) -> Check {
    let rs = [0.25, 0.5, 1.0, 2.0];
    let out = ok_or(sifn_sweep(cfg, data, &cfg.seeds, &rs))?;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let norms: Vec<f64> = rs
            .iter()
            .map(|&r| {
                out.results
                    .iter()
                    .find(|x| x.seed == seed && out.jobs[x.job].distill.sifn_r == r)
                    .map(|x| x.metrics.mean_norm)
                    .unwrap_or(f64::NAN)
            })
            .collect();
        let rho = spearman(&rs, &norms);
        ensure!(rho > 0.0, "seed {seed}: spearman {rho} for norms {norms:?}");
        lines.push(format!("{rho:.2}"));
    }
    Ok(format!("spearman per seed [{}]", lines.join(", ")))
}

fn protocol_fidelity(
    cfg: &ExperimentConfig,
    data: &Prepared,
    ablation_out: &ndlab::exp::protocols::ProtocolOutput,
) -> Check {
    let betas = cfg.sweeps.beta_grid.clone();
    let alphas = cfg.sweeps.alpha_grid.clone();
    let out = ok_or(sensitivity(cfg, data, &cfg.seeds, &betas, &alphas))?;
    ensure!(
        out.stage1.jobs.len() == betas.len(),
        "stage 1 has {} jobs",
        out.stage1.jobs.len()
    );
    for (job, &b) in out.stage1.jobs.iter().zip(&betas) {
        ensure!(
            job.distill.alpha == 1.0 && job.distill.beta == b,
            "stage 1 job {} is off-grid",
            job.setting
        );
    }
    // brute force: mean top-1 per beta straight from the runs
    let mut per_beta: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &out.stage1.results {
        per_beta.entry(r.job).or_default().push(r.metrics.top1);
    }
    let means: Vec<f64> = (0..betas.len())
        .map(|j| per_beta[&j].iter().sum::<f64>() / per_beta[&j].len() as f64)
        .collect();
    let mut best = 0;
    for j in 1..betas.len() {
        if means[j] > means[best] || (means[j] == means[best] && betas[j] < betas[best]) {
            best = j;
        }
    }
    ensure!(
        out.best_beta == betas[best],
        "best beta {} but brute force says {}",
        out.best_beta,
        betas[best]
    );
    ensure!(
        select_best_beta(&betas, &means) == Some(best),
        "selection helper disagrees"
    );
    ensure!(
        out.stage2.jobs.len() == alphas.len(),
        "stage 2 has {} jobs",
        out.stage2.jobs.len()
    );
    for (job, &a) in out.stage2.jobs.iter().zip(&alphas) {
        ensure!(
            job.distill.beta == out.best_beta && job.distill.alpha == a,
            "stage 2 job {} is off-grid",
            job.setting
        );
    }
    let csv_stages: Vec<&str> = out
        .csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap_or(""))
        .collect();
    ensure!(
        csv_stages.contains(&"1") && csv_stages.contains(&"2"),
        "sensitivity table lacks a stage"
    );

    let sums = summaries(&ablation_out.jobs, &ablation_out.results);
    let mut names: Vec<&str> = ablation_out.jobs.iter().map(|j| j.setting.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    ensure!(
        names.len() == 12 && sums.len() == 12,
        "ablation has {} settings",
        names.len()
    );
    for s in &sums {
        ensure!(s.runs == cfg.seeds.len(), "{} has {} runs", s.setting, s.runs);
    }
    for name in &names {
        ensure!(
            ablation_out
                .csv
                .lines()
                .any(|l| l.starts_with(&format!("summary,{name},"))),
            "ablation table has no summary for {name}"
        );
    }

    let seed = cfg.seeds[0];
    let sweep = ok_or(msweep(cfg, data, &[seed], &[0.0]))?;
    let teachers = ok_or(prepare_teachers(cfg, data, &[seed]))?;
    let default_run = ok_or(run_one(cfg, data, &teachers[&seed], &cfg.distill, seed))?;
    let row = &sweep.results[0];
    ensure!(
        row.outcome.student.to_bytes() == default_run.student.to_bytes()
            && same_history(&row.outcome.history, &default_run.history),
        "m=0 sweep row differs from the default run"
    );
    Ok(format!(
        "stage-1 mean top-1 {means:?}, best beta {}; 12 ablation settings; m=0 row == default run",
        out.best_beta
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ndlab"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "ndlab {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn determinism_and_io(cfg: &ExperimentConfig) -> Check {
    let dir = ok_or(TempDir::new())?;
    let planar = ndlab::exp::config::DEFAULT_CONFIG.replace(
        "[student]\nhidden_dims = [32]\nembedding_dim = 16",
        "[student]\nhidden_dims = [32]\nembedding_dim = 2\nuse_2d_embedding = true",
    );
    ensure!(
        planar != ndlab::exp::config::DEFAULT_CONFIG,
        "could not derive the planar config"
    );
    let planar_path = dir.path().join("planar.toml");
    ok_or(fs::write(&planar_path, planar))?;
    let small = ndlab::exp::config::DEFAULT_CONFIG
        .replace("seeds = [1, 2, 3, 4, 5]", "seeds = [1, 2]")
        .replace("epochs = 60", "epochs = 6")
        .replace("lr_milestones = [38, 45, 53]", "lr_milestones = [4]");
    let small_path = dir.path().join("small.toml");
    ok_or(fs::write(&small_path, small))?;

    let mut files = 0;
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for out in &runs {
        let o = s(out);
        let p = s(&planar_path);
        let sm = s(&small_path);
        run_cli(&["--out", o, "--no-timing", "gradcheck"])?;
        run_cli(&["--out", o, "--no-timing", "gen-data"])?;
        run_cli(&["--out", o, "--no-timing", "--seed", "1", "train-teacher"])?;
        run_cli(&["--config", p, "--out", o, "--no-timing", "--seed", "1", "distill"])?;
        let ckpt = out.join("student.ckpt");
        run_cli(&[
            "--config",
            p,
            "--out",
            o,
            "--no-timing",
            "dump",
            "--checkpoint",
            s(&ckpt),
        ])?;
        run_cli(&[
            "--out",
            o,
            "--no-timing",
            "plot",
            "--input",
            s(&out.join("embeddings.csv")),
        ])?;
        for cmd in ["ablation", "sensitivity", "msweep", "sifn-sweep", "trials"] {
            run_cli(&["--config", sm, "--out", o, "--no-timing", cmd])?;
        }
    }
    for entry in ok_or(fs::read_dir(&runs[0]))? {
        let name = ok_or(entry)?.file_name();
        let a = ok_or(fs::read(runs[0].join(&name)))?;
        let b = ok_or(fs::read(runs[1].join(&name)))?;
        ensure!(a == b, "{} differs between reruns", name.to_string_lossy());
        files += 1;
    }

    // checkpoint: save -> load -> save is byte-identical
    let ckpt = runs[0].join("teacher.ckpt");
    let model = ok_or(Model::load(&ckpt))?;
    let resaved = dir.path().join("resaved.ckpt");
    ok_or(model.save(&resaved))?;
    ensure!(
        ok_or(fs::read(&ckpt))? == ok_or(fs::read(&resaved))?,
        "checkpoint bytes changed on resave"
    );

    // data CSV: generated split reloads exactly
    let DataSource::Mixture(spec) = &cfg.data else {
        return Err("default recipe is not a mixture".into());
    };
    let (train, _) = ok_or(make_mixture(spec))?;
    let loaded = ok_or(load_csv(&runs[0].join("train.csv"), false))?;
    let diff = train
        .x
        .data()
        .iter()
        .zip(loaded.x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(
        loaded.y == train.y && diff < 1e-12,
        "train.csv round trip off by {diff:e}"
    );
    let again = dir.path().join("again.csv");
    ok_or(save_csv(&loaded, &again))?;
    ensure!(
        ok_or(fs::read(&again))? == ok_or(fs::read(runs[0].join("train.csv")))?,
        "csv rewrite changed bytes"
    );

    // embedding dump reloads exactly
    let student = ok_or(Model::load(&runs[0].join("student.ckpt")))?;
    let (_, test) = ok_or(make_mixture(spec))?;
    let dumped = ok_or(parse_embeddings(&ok_or(fs::read_to_string(
        runs[0].join("embeddings.csv"),
    ))?))?;
    let emb = ok_or(student.embed(&test.x))?;
    let diff = emb
        .data()
        .iter()
        .zip(dumped.x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(dumped.y == test.y && diff < 1e-12, "embedding dump off by {diff:e}");
    Ok(format!(
        "{files} output files byte-identical across reruns; checkpoint, csv and dump round trips exact"
    ))
}

fn main() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default_recipe();
    let data = Prepared::new(&cfg).expect("default data");
    let mut failures = 0;
    let mut report = |n: usize, title: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({title}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {n} ({title}, {secs:.1}s): {detail}");
            }
        }
    };

    report(1, "gradient suite", &mut gradient_suite);
    report(2, "ND analytic values", &mut nd_analytic_values);
    report(3, "regime geometry", &mut regime_geometry);
    report(4, "reductions", &mut || reductions(&cfg, &data));
    report(5, "class-mean oracle", &mut || class_mean_oracle(&cfg, &data));
    let ablation_out = ablation(&cfg, &data, &cfg.seeds).map(|(out, _)| out);
    report(6, "distillation study", &mut || {
        let out = ablation_out.as_ref().map_err(|e| e.to_string())?;
        distillation_study(&cfg, &data, out)
    });
    report(7, "SIFN sweep", &mut || sifn_monotonicity(&cfg, &data));
    report(8, "protocol fidelity", &mut || {
        let out = ablation_out.as_ref().map_err(|e| e.to_string())?;
        protocol_fidelity(&cfg, &data, out)
    });
    report(9, "determinism and I/O", &mut || determinism_and_io(&cfg));

    println!("acceptance finished in {:.1}s", start.elapsed().as_secs_f64());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
