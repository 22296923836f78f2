mod common;

use common::{tiny_config, tiny_config_with_adapter};
use ndlab::exp::protocols::{ablation, msweep, trials};
use ndlab::exp::runner::{prepare_teacher, run_one, Prepared};
use ndlab::losses::{DistillConfig, KdVariant, RegVariant};
use ndlab::metrics::{metrics_csv, MetricsRecord};
use ndlab::trainer::{distill, train_teacher, DistillOutcome};
use ndlab::Error;

fn untimed(h: &[MetricsRecord]) -> Vec<MetricsRecord> {
    h.iter().map(MetricsRecord::without_timing).collect()
}

fn assert_same_run(a: &DistillOutcome, b: &DistillOutcome) {
    assert_eq!(a.student.to_bytes(), b.student.to_bytes());
    assert_eq!(a.adapter.to_bytes(), b.adapter.to_bytes());
    assert_eq!(untimed(&a.history), untimed(&b.history));
}

#[test]
fn distillation_is_deterministic_and_leaves_teacher_untouched() {
    let cfg = tiny_config_with_adapter();
    let data = Prepared::new(&cfg).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let before = teacher.model.to_bytes();
    let a = run_one(&cfg, &data, &teacher, &cfg.distill, 3).unwrap();
    let b = run_one(&cfg, &data, &teacher, &cfg.distill, 3).unwrap();
    assert_same_run(&a, &b);
    assert!(a.adapter.num_scalars() > 0);
    assert_eq!(teacher.model.to_bytes(), before);
    assert_eq!(metrics_csv(&a.history, false), metrics_csv(&b.history, false));

    let other = run_one(&cfg, &data, &teacher, &cfg.distill, 4).unwrap();
    assert_ne!(other.student.to_bytes(), a.student.to_bytes());
}

#[test]
fn teacher_training_is_deterministic() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let a = prepare_teacher(&cfg, &data, 3).unwrap();
    let b = prepare_teacher(&cfg, &data, 3).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.cache, b.cache);
    assert_eq!(a.means, b.means);
}

#[test]
fn zero_beta_matches_plain_kd_bitwise() {
    for cfg in [tiny_config(), tiny_config_with_adapter()] {
        let data = Prepared::new(&cfg).unwrap();
        let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
        let zero_beta = DistillConfig {
            beta: 0.0,
            reg: RegVariant::Nd,
            ..cfg.distill.clone()
        };
        let kd_only = DistillConfig {
            reg: RegVariant::None,
            ..cfg.distill.clone()
        };
        let a = run_one(&cfg, &data, &teacher, &zero_beta, 3).unwrap();
        let b = run_one(&cfg, &data, &teacher, &kd_only, 3).unwrap();
        assert_same_run(&a, &b);
        assert!(a.history.iter().all(|r| r.loss_reg.is_none()));
    }
}

#[test]
fn zero_alpha_and_beta_match_ce_only_training() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let none = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        ..cfg.distill.clone()
    };
    let distilled = run_one(&cfg, &data, &teacher, &none, 3).unwrap();
    let plain = train_teacher(
        &data.student_spec,
        &data.train,
        data.test_split(),
        &cfg.student_train_for(3),
    )
    .unwrap();
    assert_eq!(distilled.student.to_bytes(), plain.model.to_bytes());
    assert_eq!(distilled.history.len(), plain.history.len());
    for (d, p) in distilled.history.iter().zip(&plain.history) {
        assert_eq!(d.split, p.split);
        assert_eq!(d.loss_ce.to_bits(), p.loss_ce.to_bits());
        assert_eq!(d.loss_total.to_bits(), p.loss_total.to_bits());
        assert_eq!(d.top1.to_bits(), p.top1.to_bits());
        assert_eq!(d.mean_norm.to_bits(), p.mean_norm.to_bits());
        // angles are measured against different class means
    }
}

#[test]
fn m_zero_sweep_row_matches_default_run() {
    let mut cfg = tiny_config();
    cfg.seeds = vec![3];
    let data = Prepared::new(&cfg).unwrap();
    let sweep = msweep(&cfg, &data, &[3], &[0.0, 0.5]).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let default_run = run_one(&cfg, &data, &teacher, &cfg.distill, 3).unwrap();
    let row = sweep.results.iter().find(|r| sweep.jobs[r.job].keys == ["0"]).unwrap();
    assert_same_run(&row.outcome, &default_run);
    let scaled = sweep
        .results
        .iter()
        .find(|r| sweep.jobs[r.job].keys == ["0.5"])
        .unwrap();
    assert_ne!(scaled.outcome.student.to_bytes(), default_run.student.to_bytes());
}

#[test]
fn scaled_teacher_norm_requires_nd() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let bad = DistillConfig {
        m: 0.5,
        reg: RegVariant::Cosine,
        ..cfg.distill.clone()
    };
    let err = run_one(&cfg, &data, &teacher, &bad, 3).unwrap_err();
    assert!(matches!(err, Error::Config(_) | Error::Contract(_)), "{err}");
}

#[test]
fn distill_rejects_mismatched_cache() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let short = data.train.subset(&(0..10).collect::<Vec<_>>());
    let err = distill(
        &teacher.model,
        &data.student_spec,
        &short,
        None,
        &teacher.cache,
        &teacher.means,
        &cfg.student_train_for(3),
        &cfg.distill,
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Contract(_) | Error::Data(_) | Error::Shape { .. }),
        "{err}"
    );
}

#[test]
fn metrics_cover_both_splits_each_epoch() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let teacher = prepare_teacher(&cfg, &data, 3).unwrap();
    let run = run_one(&cfg, &data, &teacher, &cfg.distill, 3).unwrap();
    assert_eq!(run.history.len(), 2 * cfg.student_train.epochs);
    for r in &run.history {
        assert!(r.loss_total.is_finite() && r.mean_norm > 0.0);
        assert!((0.0..=1.0).contains(&r.top1));
    }
    let kd_seen = run.history.iter().filter(|r| r.loss_kd.is_some()).count();
    assert_eq!(kd_seen, cfg.student_train.epochs);
    let kd_cfg = DistillConfig {
        kd: KdVariant::None,
        ..cfg.distill.clone()
    };
    let no_kd = run_one(&cfg, &data, &teacher, &kd_cfg, 3).unwrap();
    assert!(no_kd.history.iter().all(|r| r.loss_kd.is_none()));
}

#[test]
fn protocols_produce_expected_tables() {
    let cfg = tiny_config();
    let data = Prepared::new(&cfg).unwrap();
    let (out, meta) = ablation(&cfg, &data, &cfg.seeds).unwrap();
    assert_eq!(meta.settings.len(), 12);
    assert_eq!(out.results.len(), 12 * cfg.seeds.len());
    let lines: Vec<&str> = out.csv.lines().collect();
    assert_eq!(lines.len(), 1 + 12 * 2 + 12);
    assert!(lines[0].starts_with("kind,setting,seed,top1"));

    let t = trials(&cfg, &data, &cfg.seeds).unwrap();
    assert_eq!(t.results.len(), cfg.seeds.len());
    assert!(matches!(trials(&cfg, &data, &[3]), Err(Error::Config(_))));
    assert!(matches!(msweep(&cfg, &data, &[3], &[-1.0]), Err(Error::Config(_))));
}
