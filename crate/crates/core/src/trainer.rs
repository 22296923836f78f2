//! Minibatch SGD for teacher training and guided student distillation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classmeans::{class_means_of, ClassMeanTable, TeacherCache};
use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, cosine_direction_loss, infonce_direction_loss, kd_kl_loss, kd_weight, l2_feature_loss, nd_loss, sifn_loss,
    total_objective, DirectionReg, DistillConfig, LossOutput, NormReg, RegVariant,
};
use crate::metrics::{angle_stats, norm_stats, top1, MetricsRecord, Split};
use crate::nets::{
    adapt, adapt_eval, adapt_vjp, backward_features, embed, forward_features, forward_logits, init_adapter, logits_vjp,
    AdapterSpec, MlpSpec, Model,
};
use crate::params::ParamStore;
use crate::rng::{seeded, Stream};
use crate::tensor::{Mat, Mode};

fn default_decay() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    5e-4
}

/// Optimizer and schedule settings shared by teacher and student runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_warmup_epochs: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            return bad(format!("lr_initial must be > 0, got {}", self.lr_initial));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[0] >= pair[1] {
                return bad(format!(
                    "lr_milestones must be strictly increasing: {:?}",
                    self.lr_milestones
                ));
            }
        }
        if let Some(&last) = self.lr_milestones.last() {
            if last >= self.epochs {
                return bad(format!("lr milestone {last} is not below epochs = {}", self.epochs));
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): linear warmup, then step decay at
/// each milestone that has been reached.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.lr_warmup_epochs {
        return cfg.lr_initial * (epoch + 1) as f64 / cfg.lr_warmup_epochs as f64;
    }
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr_initial * cfg.lr_decay.powi(passed as i32)
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Velocity {
    buffers: BTreeMap<String, Mat>,
}

impl Velocity {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← μv + g + λθ;  θ ← θ − lr·v`. Parameters are left untouched if any
/// gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamStore,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
            });
        }
    }
    for (name, p) in params.iter_mut() {
        let v = velocity
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| Mat::zeros(p.value.rows(), p.value.cols()));
        for ((vj, &gj), wj) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
            *vj = momentum * *vj + gj + weight_decay * *wj;
            *wj -= lr * *vj;
        }
    }
    Ok(())
}

/// Per-example norm targets for the SIFN regularizer: the detached norm
/// from the example's previous visit, or its current norm on first sight.
#[derive(Debug, Clone)]
pub struct SifnState {
    norms: Vec<f64>,
    seen: Vec<bool>,
}

impl SifnState {
    pub fn new(n: usize) -> Self {
        Self {
            norms: vec![0.0; n],
            seen: vec![false; n],
        }
    }

    pub fn targets(&self, idx: &[usize], current: &[f64]) -> Vec<f64> {
        idx.iter()
            .zip(current)
            .map(|(&i, &c)| if self.seen[i] { self.norms[i] } else { c })
            .collect()
    }

    pub fn record(&mut self, idx: &[usize], current: &[f64]) {
        for (&i, &c) in idx.iter().zip(current) {
            self.norms[i] = c;
            self.seen[i] = true;
        }
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

/// Shuffled minibatches for one epoch. A trailing batch of a single row is
/// folded into the previous batch so train-mode batchnorm always sees at
/// least two rows.
pub fn epoch_batches(perm: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Everything a guided student run needs from the frozen teacher.
struct Guide<'a> {
    cache: &'a TeacherCache,
    means: &'a ClassMeanTable,
    cfg: &'a DistillConfig,
    adapter_spec: AdapterSpec,
}

struct Run<'a> {
    model: Model,
    adapter: ParamStore,
    guide: Option<Guide<'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Model,
    pub adapter: ParamStore,
    pub history: Vec<MetricsRecord>,
}

/// Trains a network with cross-entropy only.
pub fn train_teacher(
    spec: &MlpSpec,
    train: &LabeledData,
    test: Option<&LabeledData>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(spec, train, test)?;
    let mut run = Run {
        model: Model::init(spec.clone(), cfg.seed)?,
        adapter: ParamStore::new(),
        guide: None,
    };
    let history = train_loop(&mut run, train, test, cfg)?;
    Ok(TrainOutcome {
        model: run.model,
        history,
    })
}

/// Trains a student against a frozen teacher's cached outputs and class means.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    teacher: &Model,
    student_spec: &MlpSpec,
    train: &LabeledData,
    test: Option<&LabeledData>,
    cache: &TeacherCache,
    means: &ClassMeanTable,
    train_cfg: &TrainConfig,
    distill_cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    train_cfg.validate()?;
    distill_cfg.validate()?;
    check_data(student_spec, train, test)?;
    let t_dim = teacher.spec.embedding_dim;
    if cache.len() != train.len() || cache.labels != train.y {
        return Err(Error::Contract("teacher cache does not match the training set".into()));
    }
    if cache.embeddings.cols() != t_dim || means.dim() != t_dim {
        return Err(Error::Contract(format!(
            "teacher width {t_dim} disagrees with cache ({}) or class means ({})",
            cache.embeddings.cols(),
            means.dim()
        )));
    }
    if means.num_classes() != train.num_classes || teacher.spec.num_classes != train.num_classes {
        return Err(Error::Contract(
            "teacher and data disagree on the number of classes".into(),
        ));
    }
    if distill_cfg.m != 0.0 && distill_cfg.reg != RegVariant::Nd {
        return Err(Error::Config("m only applies to the nd regularizer".into()));
    }
    let adapter_spec = AdapterSpec::new(student_spec.embedding_dim, t_dim);
    let mut run = Run {
        model: Model::init(student_spec.clone(), train_cfg.seed)?,
        adapter: init_adapter(&adapter_spec, train_cfg.seed)?,
        guide: Some(Guide {
            cache,
            means,
            cfg: distill_cfg,
            adapter_spec,
        }),
    };
    let history = train_loop(&mut run, train, test, train_cfg)?;
    Ok(DistillOutcome {
        student: run.model,
        adapter: run.adapter,
        history,
    })
}

fn check_data(spec: &MlpSpec, train: &LabeledData, test: Option<&LabeledData>) -> Result<()> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for d in std::iter::once(train).chain(test) {
        if d.dim() != spec.input_dim || d.num_classes != spec.num_classes {
            return Err(Error::Contract(format!(
                "data ({} features, {} classes) does not fit the network ({} inputs, {} classes)",
                d.dim(),
                d.num_classes,
                spec.input_dim,
                spec.num_classes
            )));
        }
    }
    Ok(())
}

struct StepLosses {
    ce: f64,
    kd: Option<f64>,
    reg: Option<f64>,
    total: f64,
}

fn train_loop(
    run: &mut Run<'_>,
    train: &LabeledData,
    test: Option<&LabeledData>,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    let n = train.len();
    let mut shuffle = seeded(cfg.seed, Stream::Shuffle);
    let mut velocity = Velocity::new();
    let mut adapter_velocity = Velocity::new();
    let mut sifn = SifnState::new(n);
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut perm: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        perm.sort_unstable();
        perm.shuffle(&mut shuffle);
        let batches = epoch_batches(&perm, cfg.batch_size);
        let (mut ce_sum, mut kd_sum, mut reg_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut kd_seen, mut reg_seen) = (false, false);
        let start = Instant::now();
        for (step, idx) in batches.iter().enumerate() {
            let losses = train_step(run, train, idx, epoch, &mut sifn)?;
            if !losses.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {}", losses.total),
                });
            }
            let step_result = sgd_step(&mut run.model.params, &mut velocity, lr, cfg.momentum, cfg.weight_decay)
                .and_then(|_| {
                    sgd_step(
                        &mut run.adapter,
                        &mut adapter_velocity,
                        lr,
                        cfg.momentum,
                        cfg.weight_decay,
                    )
                });
            if let Err(Error::NonFiniteGradient { param }) = step_result {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("non-finite gradient for `{param}`"),
                });
            }
            step_result?;
            let w = idx.len() as f64;
            ce_sum += w * losses.ce;
            total_sum += w * losses.total;
            if let Some(kd) = losses.kd {
                kd_sum += w * kd;
                kd_seen = true;
            }
            if let Some(reg) = losses.reg {
                reg_sum += w * reg;
                reg_seen = true;
            }
        }
        let seconds_per_iter = start.elapsed().as_secs_f64() / batches.len().max(1) as f64;

        let eval_train = evaluate(run, train)?;
        let own;
        let reference = match &run.guide {
            Some(g) => g.means,
            None => {
                own = class_means_of(&eval_train.features, &train.y, train.num_classes)?;
                &own
            }
        };
        let nf = n as f64;
        history.push(MetricsRecord {
            epoch,
            split: Split::Train,
            loss_ce: ce_sum / nf,
            loss_kd: kd_seen.then(|| kd_sum / nf),
            loss_reg: reg_seen.then(|| reg_sum / nf),
            loss_total: total_sum / nf,
            top1: top1(&eval_train.logits, &train.y),
            mean_norm: norm_stats(&eval_train.features)?.mean,
            mean_angle_deg: angle_stats(&eval_train.features, reference, &train.y)?,
            lr,
            seconds_per_iter,
        });
        if let Some(test) = test.filter(|t| !t.is_empty()) {
            let ev = evaluate(run, test)?;
            let ce = ce_loss(&ev.logits, &test.y)?.value;
            history.push(MetricsRecord {
                epoch,
                split: Split::Test,
                loss_ce: ce,
                loss_kd: None,
                loss_reg: None,
                loss_total: ce,
                top1: top1(&ev.logits, &test.y),
                mean_norm: norm_stats(&ev.features)?.mean,
                mean_angle_deg: angle_stats(&ev.features, reference, &test.y)?,
                lr,
                seconds_per_iter,
            });
        }
    }
    Ok(history)
}

fn train_step(
    run: &mut Run<'_>,
    data: &LabeledData,
    idx: &[usize],
    epoch: usize,
    sifn: &mut SifnState,
) -> Result<StepLosses> {
    let spec = run.model.spec.clone();
    let params = &mut run.model.params;
    params.zero_grad();
    run.adapter.zero_grad();

    let xb = data.x.select_rows(idx);
    let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
    let (emb, tape) = forward_features(params, &spec, &xb, Mode::Train)?;
    let logits = forward_logits(params, &spec, &emb)?;
    let ce = ce_loss(&logits, &yb)?;
    let mut d_logits = match &run.guide {
        Some(g) if !g.cfg.use_ce => Mat::zeros(logits.rows(), logits.cols()),
        _ => ce.grad,
    };
    let mut kd_value = None;
    let mut reg_value = None;

    if let Some(g) = &run.guide {
        if g.cfg.kd_active() {
            let z_t = g.cache.logits.select_rows(idx);
            let kd = kd_kl_loss(&logits, &z_t, g.cfg.tau)?;
            d_logits.axpy(kd_weight(g.cfg, epoch) * g.cfg.alpha, &kd.grad)?;
            kd_value = Some(kd.value);
        }
    }
    let mut d_emb = logits_vjp(params, &emb, &d_logits)?;

    if let Some(g) = run.guide.as_ref().filter(|g| g.cfg.reg_active()) {
        let (feat, adapter_tape) = if g.adapter_spec.enabled {
            let (f, t) = adapt(&mut run.adapter, &g.adapter_spec, &emb, Mode::Train)?;
            (f, Some(t))
        } else {
            (emb.clone(), None)
        };
        let reg = regularizer(g, &feat, &yb, idx, sifn)?;
        let d_feat = reg.grad.scale(g.cfg.beta);
        let d_back = match adapter_tape {
            Some(t) => adapt_vjp(&mut run.adapter, &t, &d_feat)?,
            None => d_feat,
        };
        d_emb.add_assign(&d_back)?;
        reg_value = Some(reg.value);
    }
    backward_features(params, &spec, &tape, &d_emb)?;

    let total = match &run.guide {
        Some(g) => total_objective(
            ce.value,
            kd_value.unwrap_or(0.0),
            reg_value.unwrap_or(0.0),
            g.cfg,
            epoch,
        ),
        None => ce.value,
    };
    Ok(StepLosses {
        ce: ce.value,
        kd: kd_value,
        reg: reg_value,
        total,
    })
}

fn regularizer(g: &Guide<'_>, feat: &Mat, labels: &[usize], idx: &[usize], sifn: &mut SifnState) -> Result<LossOutput> {
    let direction = |d: DirectionReg| match d {
        DirectionReg::Cosine => cosine_direction_loss(feat, g.means, labels),
        DirectionReg::InfoNce => infonce_direction_loss(feat, g.means, labels),
    };
    let norm = |r: NormReg, sifn: &mut SifnState| match r {
        NormReg::L2 => l2_feature_loss(feat, &g.cache.embeddings.select_rows(idx), labels),
        NormReg::Sifn => {
            let current = feat.row_norms();
            let out = sifn_loss(&sifn.targets(idx, &current), feat, g.cfg.sifn_r);
            sifn.record(idx, &current);
            out
        }
    };
    match g.cfg.reg {
        RegVariant::None => Err(Error::Contract("no regularizer selected".into())),
        RegVariant::L2 => norm(NormReg::L2, sifn),
        RegVariant::Sifn => norm(NormReg::Sifn, sifn),
        RegVariant::Cosine => direction(DirectionReg::Cosine),
        RegVariant::InfoNce => direction(DirectionReg::InfoNce),
        RegVariant::Nd => {
            let tn: Vec<f64> = idx.iter().map(|&i| g.cache.norms[i]).collect();
            Ok(nd_loss(feat, &tn, g.means, labels, g.cfg.m)?.0)
        }
        RegVariant::Combined(d, r) => {
            let a = direction(d)?;
            let b = norm(r, sifn)?;
            let mut grad = a.grad.scale(0.5);
            grad.axpy(0.5, &b.grad)?;
            Ok(LossOutput {
                value: 0.5 * a.value + 0.5 * b.value,
                grad,
            })
        }
    }
}

/// Eval-mode outputs of a run on a dataset.
pub struct Evaluation {
    pub logits: Mat,
    /// Regularized features: adapted embeddings when an adapter is active.
    pub features: Mat,
}

fn evaluate(run: &Run<'_>, data: &LabeledData) -> Result<Evaluation> {
    let emb = embed(&run.model.params, &run.model.spec, &data.x)?;
    let logits = forward_logits(&run.model.params, &run.model.spec, &emb)?;
    let features = match &run.guide {
        Some(g) if g.adapter_spec.enabled => adapt_eval(&run.adapter, &g.adapter_spec, &emb)?,
        _ => emb,
    };
    Ok(Evaluation { logits, features })
}

/// Eval-mode logits and regularized features of a trained student.
pub fn evaluate_student(
    student: &Model,
    adapter: &ParamStore,
    adapter_spec: &AdapterSpec,
    data: &LabeledData,
) -> Result<Evaluation> {
    let emb = student.embed(&data.x)?;
    let logits = forward_logits(&student.params, &student.spec, &emb)?;
    let features = if adapter_spec.enabled {
        adapt_eval(adapter, adapter_spec, &emb)?
    } else {
        emb
    };
    Ok(Evaluation { logits, features })
}
