//! Distillation losses. Each returns the scalar loss and its gradient with
//! respect to the student-side input; teacher-side quantities (teacher
//! logits and features, class means, teacher norms) are constants.
//!
//! The feature-space losses (L2, cosine, InfoNCE, ND) average per class
//! first and then over the classes present in the batch:
//! `(1/C') Σ_k (1/n_k) Σ_{i: y_i = k} ℓ_i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classmeans::{ClassMeanTable, SelectionStrategy};
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, log_softmax_row, softmax_row, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Mat,
}

/// Weight of each example under class-balanced averaging.
pub fn class_balanced_weights(labels: &[usize]) -> Vec<f64> {
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; c];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    labels.iter().map(|&l| 1.0 / (present * counts[l] as f64)).collect()
}

fn check_batch(op: &'static str, f: &Mat, labels: &[usize]) -> Result<()> {
    if f.rows() != labels.len() {
        return Err(Error::Shape {
            op,
            left: f.shape(),
            right: (labels.len(), 1),
        });
    }
    if f.rows() == 0 {
        return Err(Error::Data(format!("{op}: empty batch")));
    }
    Ok(())
}

fn check_table(op: &'static str, f: &Mat, labels: &[usize], table: &ClassMeanTable) -> Result<()> {
    check_batch(op, f, labels)?;
    if f.cols() != table.dim() {
        return Err(Error::Shape {
            op,
            left: f.shape(),
            right: table.means().shape(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= table.num_classes()) {
        return Err(Error::Data(format!("{op}: label {bad} has no class mean")));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Cross-entropy at temperature 1, averaged over the batch.
pub fn ce_loss(logits: &Mat, labels: &[usize]) -> Result<LossOutput> {
    check_batch("ce_loss", logits, labels)?;
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let n = logits.rows() as f64;
    let mut grad = Mat::zeros(logits.rows(), c);
    let mut logp = vec![0.0; c];
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        log_softmax_row(logits.row(i), 1.0, &mut logp);
        value -= logp[y];
        let g = grad.row_mut(i);
        softmax_row(logits.row(i), 1.0, g);
        g[y] -= 1.0;
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(LossOutput { value: value / n, grad })
}

/// `τ² · mean_i KL(softmax(z_t/τ) ‖ softmax(z_s/τ))`.
pub fn kd_kl_loss(z_s: &Mat, z_t: &Mat, tau: f64) -> Result<LossOutput> {
    check_same_shape("kd_kl_loss", z_s, z_t)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    if z_s.rows() == 0 {
        return Err(Error::Data("kd_kl_loss: empty batch".into()));
    }
    let (rows, c) = z_s.shape();
    let n = rows as f64;
    let mut grad = Mat::zeros(rows, c);
    let (mut qt, mut lqt, mut qs, mut lqs) = (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let mut value = 0.0;
    for i in 0..rows {
        softmax_row(z_t.row(i), tau, &mut qt);
        log_softmax_row(z_t.row(i), tau, &mut lqt);
        softmax_row(z_s.row(i), tau, &mut qs);
        log_softmax_row(z_s.row(i), tau, &mut lqs);
        for j in 0..c {
            if qt[j] > 0.0 {
                value += qt[j] * (lqt[j] - lqs[j]);
            }
        }
        // d/dz_s of τ²·KL = τ·(q_s − q_t)
        for (g, (s, t)) in grad.row_mut(i).iter_mut().zip(qs.iter().zip(&qt)) {
            *g = tau * (s - t) / n;
        }
    }
    Ok(LossOutput {
        value: tau * tau * value / n,
        grad,
    })
}

/// Class-balanced squared L2 distance between student and teacher features.
pub fn l2_feature_loss(f_s: &Mat, f_t: &Mat, labels: &[usize]) -> Result<LossOutput> {
    check_same_shape("l2_feature_loss", f_s, f_t)?;
    check_batch("l2_feature_loss", f_s, labels)?;
    let w = class_balanced_weights(labels);
    let mut grad = Mat::zeros(f_s.rows(), f_s.cols());
    let mut value = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        let mut sq = 0.0;
        for ((g, &s), &t) in grad.row_mut(i).iter_mut().zip(f_s.row(i)).zip(f_t.row(i)) {
            let d = s - t;
            sq += d * d;
            *g = 2.0 * wi * d;
        }
        value += wi * sq;
    }
    Ok(LossOutput { value, grad })
}

/// Stepwise feature-norm increase: `mean_i (prev_i + r − ‖f_i‖)²`, with
/// `prev_i` a detached norm from an earlier step. Rows with zero norm get a
/// zero gradient.
pub fn sifn_loss(norm_prev: &[f64], f_s: &Mat, r: f64) -> Result<LossOutput> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Param(format!("sifn step r must be > 0, got {r}")));
    }
    if norm_prev.len() != f_s.rows() {
        return Err(Error::Shape {
            op: "sifn_loss",
            left: f_s.shape(),
            right: (norm_prev.len(), 1),
        });
    }
    if f_s.rows() == 0 {
        return Err(Error::Data("sifn_loss: empty batch".into()));
    }
    if let Some(bad) = norm_prev.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Param(format!(
            "previous norms must be finite and >= 0, got {bad}"
        )));
    }
    let n = f_s.rows() as f64;
    let mut grad = Mat::zeros(f_s.rows(), f_s.cols());
    let mut value = 0.0;
    for (i, &prev) in norm_prev.iter().enumerate() {
        let f = f_s.row(i);
        let norm = l2_norm(f);
        let gap = prev + r - norm;
        value += gap * gap;
        if norm > 0.0 {
            let s = -2.0 * gap / (n * norm);
            for (g, &v) in grad.row_mut(i).iter_mut().zip(f) {
                *g = s * v;
            }
        }
    }
    Ok(LossOutput { value: value / n, grad })
}

fn nonzero_norm(f: &[f64], index: usize) -> Result<f64> {
    let n = l2_norm(f);
    if !(n > 0.0) {
        return Err(Error::Singularity {
            index,
            what: "student feature",
        });
    }
    Ok(n)
}

/// Class-balanced mean of `1 − cos(f_i, c_{y_i})`.
pub fn cosine_direction_loss(f_s: &Mat, table: &ClassMeanTable, labels: &[usize]) -> Result<LossOutput> {
    check_table("cosine_direction_loss", f_s, labels, table)?;
    let w = class_balanced_weights(labels);
    let mut grad = Mat::zeros(f_s.rows(), f_s.cols());
    let mut value = 0.0;
    for (i, (&y, &wi)) in labels.iter().zip(&w).enumerate() {
        let f = f_s.row(i);
        let norm = nonzero_norm(f, i)?;
        let e = table.unit_dirs().row(y);
        let cos = dot(f, e) / norm;
        value += wi * (1.0 - cos);
        // ∂cos/∂f = e/‖f‖ − cos·f/‖f‖²
        for ((g, &ej), &fj) in grad.row_mut(i).iter_mut().zip(e).zip(f) {
            *g = -wi * (ej / norm - cos * fj / (norm * norm));
        }
    }
    Ok(LossOutput { value, grad })
}

/// Class-balanced mean of `−log softmax_j(cos(f_i, c_j))[y_i]`, with no
/// temperature on the cosines.
pub fn infonce_direction_loss(f_s: &Mat, table: &ClassMeanTable, labels: &[usize]) -> Result<LossOutput> {
    check_table("infonce_direction_loss", f_s, labels, table)?;
    let c = table.num_classes();
    let w = class_balanced_weights(labels);
    let mut grad = Mat::zeros(f_s.rows(), f_s.cols());
    let mut cos = vec![0.0; c];
    let mut p = vec![0.0; c];
    let mut logp = vec![0.0; c];
    let mut value = 0.0;
    for (i, (&y, &wi)) in labels.iter().zip(&w).enumerate() {
        let f = f_s.row(i);
        let norm = nonzero_norm(f, i)?;
        for (k, cv) in cos.iter_mut().enumerate() {
            *cv = dot(f, table.unit_dirs().row(k)) / norm;
        }
        log_softmax_row(&cos, 1.0, &mut logp);
        softmax_row(&cos, 1.0, &mut p);
        value -= wi * logp[y];
        // dℓ/dcos_k = p_k − [k = y]
        p[y] -= 1.0;
        let radial: f64 = p.iter().zip(&cos).map(|(a, b)| a * b).sum();
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let mut tangential = 0.0;
            for (k, &pk) in p.iter().enumerate() {
                tangential += pk * table.unit_dirs().get(k, j);
            }
            *gj = wi * (tangential / norm - radial * f[j] / (norm * norm));
        }
    }
    Ok(LossOutput { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdRegime {
    /// `‖f^s‖ ≤ (1+m)‖f^t‖`: the teacher norm is the denominator.
    SmallNorm,
    /// `‖f^s‖ > (1+m)‖f^t‖`: the student norm is the denominator.
    LargeNorm,
}

/// Per-example projection geometry of the ND loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NdDiagnostics {
    pub cosine: Vec<f64>,
    /// `‖f^s‖ · cos(f^s, c)`, i.e. the signed length of the projection of
    /// `f^s` onto the class-mean direction.
    pub proj_norm: Vec<f64>,
    /// `(1+m)·‖f^t‖`.
    pub teacher_norm: Vec<f64>,
    pub regime: Vec<NdRegime>,
}

/// ND value and gradient for a single example.
#[derive(Debug, Clone, PartialEq)]
pub struct NdExample {
    pub value: f64,
    pub grad: Vec<f64>,
    pub regime: NdRegime,
    pub proj: f64,
    pub norm: f64,
}

/// `−(f·e) / max{‖f‖, scaled_teacher_norm}`. At equality the teacher-norm
/// branch is taken.
pub fn nd_example(f: &[f64], e: &[f64], scaled_teacher_norm: f64) -> NdExample {
    let norm = l2_norm(f);
    let proj = dot(f, e);
    if norm > scaled_teacher_norm {
        // −(f·e)/‖f‖, gradient −(e − (f·e)·f/‖f‖²)/‖f‖, orthogonal to f
        let value = -proj / norm;
        let grad = f
            .iter()
            .zip(e)
            .map(|(&fj, &ej)| -(ej - proj * fj / (norm * norm)) / norm)
            .collect();
        NdExample {
            value,
            grad,
            regime: NdRegime::LargeNorm,
            proj,
            norm,
        }
    } else {
        let value = -proj / scaled_teacher_norm;
        let grad = e.iter().map(|&ej| -ej / scaled_teacher_norm).collect();
        NdExample {
            value,
            grad,
            regime: NdRegime::SmallNorm,
            proj,
            norm,
        }
    }
}

/// ND loss with teacher-norm scaling `m` (`m = 0` is the unscaled loss).
pub fn nd_loss(
    f_s: &Mat,
    teacher_norms: &[f64],
    table: &ClassMeanTable,
    labels: &[usize],
    m: f64,
) -> Result<(LossOutput, NdDiagnostics)> {
    check_table("nd_loss", f_s, labels, table)?;
    if teacher_norms.len() != f_s.rows() {
        return Err(Error::Shape {
            op: "nd_loss",
            left: f_s.shape(),
            right: (teacher_norms.len(), 1),
        });
    }
    if !(m > -1.0) || !m.is_finite() {
        return Err(Error::Param(format!("teacher-norm scale m must be > -1, got {m}")));
    }
    let w = class_balanced_weights(labels);
    let n = f_s.rows();
    let mut grad = Mat::zeros(n, f_s.cols());
    let mut diag = NdDiagnostics {
        cosine: Vec::with_capacity(n),
        proj_norm: Vec::with_capacity(n),
        teacher_norm: Vec::with_capacity(n),
        regime: Vec::with_capacity(n),
    };
    let mut value = 0.0;
    for (i, (&y, &wi)) in labels.iter().zip(&w).enumerate() {
        let tn = teacher_norms[i];
        if !(tn > 0.0) || !tn.is_finite() {
            return Err(Error::Data(format!(
                "teacher norm at example {i} must be > 0, got {tn}"
            )));
        }
        let scaled = tn * (1.0 + m);
        let ex = nd_example(f_s.row(i), table.unit_dirs().row(y), scaled);
        value += wi * ex.value;
        for (g, &v) in grad.row_mut(i).iter_mut().zip(&ex.grad) {
            *g = wi * v;
        }
        let cosine = if ex.norm > 0.0 { ex.proj / ex.norm } else { 0.0 };
        diag.cosine.push(cosine);
        diag.proj_norm.push(ex.proj);
        diag.teacher_norm.push(scaled);
        diag.regime.push(ex.regime);
    }
    Ok((LossOutput { value, grad }, diag))
}

// ---------------------------------------------------------------------------
// loss composition

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdVariant {
    None,
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionReg {
    Cosine,
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormReg {
    L2,
    Sifn,
}

/// Feature regularizer. `Combined` applies a direction and a norm term at
/// once, each weighted by half of β.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RegVariant {
    None,
    L2,
    Sifn,
    Cosine,
    InfoNce,
    #[default]
    Nd,
    Combined(DirectionReg, NormReg),
}

impl RegVariant {
    pub fn uses_class_means(self) -> bool {
        matches!(
            self,
            RegVariant::Cosine | RegVariant::InfoNce | RegVariant::Nd | RegVariant::Combined(..)
        )
    }

    pub fn uses_sifn(self) -> bool {
        matches!(self, RegVariant::Sifn | RegVariant::Combined(_, NormReg::Sifn))
    }
}

impl fmt::Display for RegVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = |d: &DirectionReg| match d {
            DirectionReg::Cosine => "cosine",
            DirectionReg::InfoNce => "infonce",
        };
        let norm = |n: &NormReg| match n {
            NormReg::L2 => "l2",
            NormReg::Sifn => "sifn",
        };
        match self {
            RegVariant::None => f.write_str("none"),
            RegVariant::L2 => f.write_str("l2"),
            RegVariant::Sifn => f.write_str("sifn"),
            RegVariant::Cosine => f.write_str("cosine"),
            RegVariant::InfoNce => f.write_str("infonce"),
            RegVariant::Nd => f.write_str("nd"),
            RegVariant::Combined(d, n) => write!(f, "{}+{}", dir(d), norm(n)),
        }
    }
}

impl FromStr for RegVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => RegVariant::None,
            "l2" => RegVariant::L2,
            "sifn" => RegVariant::Sifn,
            "cosine" => RegVariant::Cosine,
            "infonce" => RegVariant::InfoNce,
            "nd" => RegVariant::Nd,
            "cosine+l2" => RegVariant::Combined(DirectionReg::Cosine, NormReg::L2),
            "cosine+sifn" => RegVariant::Combined(DirectionReg::Cosine, NormReg::Sifn),
            "infonce+l2" => RegVariant::Combined(DirectionReg::InfoNce, NormReg::L2),
            "infonce+sifn" => RegVariant::Combined(DirectionReg::InfoNce, NormReg::Sifn),
            other => return Err(Error::Config(format!("unknown regularizer `{other}`"))),
        })
    }
}

impl TryFrom<String> for RegVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RegVariant> for String {
    fn from(r: RegVariant) -> String {
        r.to_string()
    }
}

fn default_true() -> bool {
    true
}

fn default_tau() -> f64 {
    4.0
}

fn default_one() -> f64 {
    1.0
}

fn default_sifn_r() -> f64 {
    1.0
}

fn default_kd_warmup() -> usize {
    2
}

/// Loss-composition knobs for one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Include the cross-entropy term. Off only for KL-without-CE ablations.
    #[serde(default = "default_true")]
    pub use_ce: bool,
    #[serde(default = "default_one")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub m: f64,
    #[serde(default)]
    pub kd: KdVariant,
    #[serde(default)]
    pub reg: RegVariant,
    #[serde(default = "default_sifn_r")]
    pub sifn_r: f64,
    #[serde(default = "default_kd_warmup")]
    pub kd_warmup_epochs: usize,
    #[serde(default)]
    pub class_means: SelectionStrategy,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            use_ce: true,
            alpha: 1.0,
            beta: 1.0,
            tau: default_tau(),
            m: 0.0,
            kd: KdVariant::Kl,
            reg: RegVariant::Nd,
            sifn_r: default_sifn_r(),
            kd_warmup_epochs: default_kd_warmup(),
            class_means: SelectionStrategy::All,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.m > -1.0) || !self.m.is_finite() {
            return bad(format!("m must be > -1, got {}", self.m));
        }
        if !(self.sifn_r > 0.0) || !self.sifn_r.is_finite() {
            return bad(format!("sifn_r must be > 0, got {}", self.sifn_r));
        }
        Ok(())
    }

    /// The logit-distillation term runs only with a KL variant and α > 0.
    pub fn kd_active(&self) -> bool {
        self.kd == KdVariant::Kl && self.alpha > 0.0
    }

    /// The feature regularizer runs only with a variant selected and β > 0.
    pub fn reg_active(&self) -> bool {
        self.reg != RegVariant::None && self.beta > 0.0
    }
}

/// Linear warmup factor for the distillation term:
/// `min(1, (epoch+1) / kd_warmup_epochs)`, or 1 without warmup.
pub fn kd_weight(cfg: &DistillConfig, epoch: usize) -> f64 {
    if cfg.kd_warmup_epochs == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / cfg.kd_warmup_epochs as f64).min(1.0)
    }
}

/// `L_ce + w(epoch)·α·L_kd + β·L_reg`; the CE term is dropped when
/// `use_ce` is off.
pub fn total_objective(ce: f64, kd: f64, reg: f64, cfg: &DistillConfig, epoch: usize) -> f64 {
    let ce = if cfg.use_ce { ce } else { 0.0 };
    ce + kd_weight(cfg, epoch) * cfg.alpha * kd + cfg.beta * reg
}
