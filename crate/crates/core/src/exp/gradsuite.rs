//! Finite-difference checks of every loss and network primitive on small
//! fixed-seed instances.

use crate::classmeans::ClassMeanTable;
use crate::error::Result;
use crate::gradcheck::{check_mat, finite_diff_check, GradCheckReport, DEFAULT_STEP};
use crate::losses::{
    ce_loss, cosine_direction_loss, infonce_direction_loss, kd_kl_loss, l2_feature_loss, nd_loss, sifn_loss,
};
use crate::nets::{
    adapt, adapt_vjp, backward_features, forward_features, forward_logits, init_adapter, init_params, logits_vjp,
    AdapterSpec, MlpSpec,
};
use crate::params::ParamStore;
use crate::rng::{seeded, Normal, Stream};
use crate::tensor::{affine, affine_vjp, batchnorm, batchnorm_vjp, relu, relu_vjp, Mat, Mode, RunningStats, BN_EPS};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedReport {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADCHECK_TOL)
    }
}

struct Fixture {
    normal: Normal,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            normal: Normal::new(seeded(seed, Stream::Fixture)),
        }
    }

    fn mat(&mut self, rows: usize, cols: usize, scale: f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = scale * self.normal.sample();
        }
        m
    }

    /// Entries bounded away from zero, for checks through a ReLU kink.
    fn mat_off_zero(&mut self, rows: usize, cols: usize) -> Mat {
        let mut m = self.mat(rows, cols, 1.0);
        for v in m.data_mut() {
            *v = v.signum() * (0.2 + v.abs());
        }
        m
    }
}

const LABELS: [usize; 6] = [0, 1, 2, 0, 1, 0];

fn means_table(fx: &mut Fixture, d: usize) -> Result<ClassMeanTable> {
    ClassMeanTable::from_means(fx.mat(3, d, 1.0))
}

fn weighted_sum(y: &Mat, r: &Mat) -> Result<f64> {
    y.dot(r)
}

/// Runs every check. With `inject_fault` the cross-entropy gradient is
/// deliberately perturbed so the suite must fail.
pub fn run_suite(inject_fault: bool) -> Result<Vec<NamedReport>> {
    let h = DEFAULT_STEP;
    let mut fx = Fixture::new(11);
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradCheckReport| out.push(NamedReport { name, report });
    let labels = &LABELS[..];

    // losses
    let z = fx.mat(6, 3, 1.5);
    let mut g = ce_loss(&z, labels)?.grad;
    if inject_fault {
        g.data_mut()[0] *= 1.01;
    }
    push("ce", check_mat("logits", &z, &g, |m| Ok(ce_loss(m, labels)?.value), h)?);

    let z_t = fx.mat(6, 3, 3.0);
    let g = kd_kl_loss(&z, &z_t, 4.0)?.grad;
    push(
        "kl",
        check_mat("logits", &z, &g, |m| Ok(kd_kl_loss(m, &z_t, 4.0)?.value), h)?,
    );

    let f = fx.mat(6, 4, 1.0);
    let f_t = fx.mat(6, 4, 2.0);
    let g = l2_feature_loss(&f, &f_t, labels)?.grad;
    push(
        "l2_feature",
        check_mat("features", &f, &g, |m| Ok(l2_feature_loss(m, &f_t, labels)?.value), h)?,
    );

    let prev: Vec<f64> = f.row_norms().iter().map(|n| 0.8 * n).collect();
    let g = sifn_loss(&prev, &f, 1.0)?.grad;
    push(
        "sifn",
        check_mat("features", &f, &g, |m| Ok(sifn_loss(&prev, m, 1.0)?.value), h)?,
    );

    let table = means_table(&mut fx, 4)?;
    let g = cosine_direction_loss(&f, &table, labels)?.grad;
    push(
        "cosine",
        check_mat(
            "features",
            &f,
            &g,
            |m| Ok(cosine_direction_loss(m, &table, labels)?.value),
            h,
        )?,
    );
    let g = infonce_direction_loss(&f, &table, labels)?.grad;
    push(
        "infonce",
        check_mat(
            "features",
            &f,
            &g,
            |m| Ok(infonce_direction_loss(m, &table, labels)?.value),
            h,
        )?,
    );

    // teacher norms put half the rows in each regime, well away from the switch
    let norms = f.row_norms();
    let tn: Vec<f64> = norms
        .iter()
        .enumerate()
        .map(|(i, n)| if i % 2 == 0 { 0.5 * n } else { 2.0 * n })
        .collect();
    for (name, m) in [("nd", 0.0), ("nd_scaled", 0.3)] {
        let g = nd_loss(&f, &tn, &table, labels, m)?.0.grad;
        push(
            name,
            check_mat(
                "features",
                &f,
                &g,
                |x| Ok(nd_loss(x, &tn, &table, labels, m)?.0.value),
                h,
            )?,
        );
    }

    // primitives
    let x = fx.mat(5, 4, 1.0);
    let mut store = ParamStore::new();
    store.insert("x", x.clone());
    store.insert("w", fx.mat(4, 3, 1.0));
    store.insert("b", fx.mat(1, 3, 1.0));
    let r = fx.mat(5, 3, 1.0);
    let affine_loss = |p: &ParamStore| -> Result<f64> {
        let y = affine(p.value("x")?, p.value("w")?, Some(p.value("b")?.data()))?;
        weighted_sum(&y, &r)
    };
    let ag = affine_vjp(store.value("x")?, store.value("w")?, &r)?;
    store.accumulate_grad("x", &ag.dx)?;
    store.accumulate_grad("w", &ag.dw)?;
    store.accumulate_grad("b", &Mat::row_vector(&ag.db))?;
    push("affine", finite_diff_check(affine_loss, &store, h)?);

    let xr = fx.mat_off_zero(5, 4);
    let rr = fx.mat(5, 4, 1.0);
    let g = relu_vjp(&xr, &rr)?;
    push("relu", check_mat("x", &xr, &g, |m| weighted_sum(&relu(m), &rr), h)?);

    let mut store = ParamStore::new();
    store.insert("x", fx.mat(6, 3, 1.0));
    store.insert("gamma", fx.mat(1, 3, 1.0));
    store.insert("beta", fx.mat(1, 3, 1.0));
    let rb = fx.mat(6, 3, 1.0);
    let bn_loss = |p: &ParamStore| -> Result<f64> {
        let mut stats = RunningStats::new(3);
        let (y, _) = batchnorm(
            p.value("x")?,
            p.value("gamma")?.data(),
            p.value("beta")?.data(),
            BN_EPS,
            Mode::Train,
            &mut stats,
        )?;
        weighted_sum(&y, &rb)
    };
    let mut stats = RunningStats::new(3);
    let (_, cache) = batchnorm(
        store.value("x")?,
        store.value("gamma")?.data(),
        store.value("beta")?.data(),
        BN_EPS,
        Mode::Train,
        &mut stats,
    )?;
    let bg = batchnorm_vjp(&cache, &rb)?;
    store.accumulate_grad("x", &bg.dx)?;
    store.accumulate_grad("gamma", &Mat::row_vector(&bg.dgamma))?;
    store.accumulate_grad("beta", &Mat::row_vector(&bg.dbeta))?;
    push("batchnorm", finite_diff_check(bn_loss, &store, h)?);

    // whole network under cross-entropy
    let spec = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![5, 4],
        embedding_dim: 3,
        num_classes: 3,
        use_2d_embedding: false,
    };
    let xn = fx.mat(6, 4, 1.0);
    let net_loss = |p: &ParamStore| -> Result<f64> {
        let mut p = p.clone();
        let (emb, _) = forward_features(&mut p, &spec, &xn, Mode::Train)?;
        Ok(ce_loss(&forward_logits(&p, &spec, &emb)?, labels)?.value)
    };
    let mut params = init_params(&spec, 3)?;
    let base = params.clone();
    let (emb, tape) = forward_features(&mut params, &spec, &xn, Mode::Train)?;
    let ce = ce_loss(&forward_logits(&params, &spec, &emb)?, labels)?;
    let d_emb = logits_vjp(&mut params, &emb, &ce.grad)?;
    backward_features(&mut params, &spec, &tape, &d_emb)?;
    let mut checked = base;
    for (name, p) in params.iter() {
        checked.accumulate_grad(name, &p.grad)?;
    }
    push("mlp", finite_diff_check(net_loss, &checked, h)?);

    // projection adapter
    let aspec = AdapterSpec::new(3, 5);
    let ea = fx.mat(6, 3, 1.0);
    let ra = fx.mat(6, 5, 1.0);
    let adapter_loss = |p: &ParamStore| -> Result<f64> {
        let mut p = p.clone();
        weighted_sum(&adapt(&mut p, &aspec, &ea, Mode::Train)?.0, &ra)
    };
    let mut ap = init_adapter(&aspec, 3)?;
    let base = ap.clone();
    let (_, atape) = adapt(&mut ap, &aspec, &ea, Mode::Train)?;
    adapt_vjp(&mut ap, &atape, &ra)?;
    let mut checked = base;
    for (name, p) in ap.iter() {
        checked.accumulate_grad(name, &p.grad)?;
    }
    push("adapter", finite_diff_check(adapter_loss, &checked, h)?);

    // student net with classifier and adapter under ce + nd, end to end
    let student = MlpSpec {
        input_dim: 4,
        hidden_dims: vec![5],
        embedding_dim: 3,
        num_classes: 3,
        use_2d_embedding: false,
    };
    let t5 = means_table(&mut fx, 5)?;
    let tn5: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 0.05 } else { 50.0 }).collect();
    let mut joint = init_params(&student, 4)?;
    for (name, p) in init_adapter(&aspec, 4)?.iter() {
        joint.insert(name, p.value.clone());
    }
    let adapter_names: Vec<String> = joint
        .names()
        .filter(|n| n.starts_with("adapter"))
        .map(String::from)
        .collect();
    let split = |p: &ParamStore| -> Result<(ParamStore, ParamStore)> {
        let mut net = ParamStore::new();
        let mut ad = init_adapter(&aspec, 0)?;
        for (name, v) in p.iter() {
            if adapter_names.iter().any(|a| a == name) {
                *ad.value_mut(name)? = v.value.clone();
            } else {
                net.insert(name, v.value.clone());
            }
        }
        for (name, b) in p.buffers() {
            if name.starts_with("adapter") {
                *ad.buffer_mut(name)? = b.clone();
            } else {
                net.insert_buffer(name, b.clone());
            }
        }
        Ok((net, ad))
    };
    for (name, b) in init_adapter(&aspec, 4)?.buffers() {
        joint.insert_buffer(name, b.clone());
    }
    let pipeline_loss = |p: &ParamStore| -> Result<f64> {
        let (mut net, mut ad) = split(p)?;
        let (emb, _) = forward_features(&mut net, &student, &xn, Mode::Train)?;
        let (feat, _) = adapt(&mut ad, &aspec, &emb, Mode::Train)?;
        let ce = ce_loss(&forward_logits(&net, &student, &emb)?, labels)?.value;
        Ok(ce + nd_loss(&feat, &tn5, &t5, labels, 0.0)?.0.value)
    };
    let (mut net, mut ad) = split(&joint)?;
    let (emb, tape) = forward_features(&mut net, &student, &xn, Mode::Train)?;
    let (feat, atape) = adapt(&mut ad, &aspec, &emb, Mode::Train)?;
    let nd = nd_loss(&feat, &tn5, &t5, labels, 0.0)?.0;
    let ce = ce_loss(&forward_logits(&net, &student, &emb)?, labels)?;
    let mut d_emb = logits_vjp(&mut net, &emb, &ce.grad)?;
    d_emb.add_assign(&adapt_vjp(&mut ad, &atape, &nd.grad)?)?;
    backward_features(&mut net, &student, &tape, &d_emb)?;
    for (name, p) in net.iter().chain(ad.iter()) {
        joint.accumulate_grad(name, &p.grad)?;
    }
    push("student_adapter_nd", finite_diff_check(pipeline_loss, &joint, h)?);

    Ok(out)
}

/// CSV report: `check,max_rel_error,worst_param,status`.
pub fn report_csv(reports: &[NamedReport]) -> String {
    let mut out = String::from("check,max_rel_error,worst_param,status\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{},{}\n",
            r.name,
            r.report.max_rel_error,
            r.report.worst_param,
            if r.passes() { "pass" } else { "fail" }
        ));
    }
    out
}
