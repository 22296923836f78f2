//! MLP feature extractor, linear classifier head, and the projection
//! adapter used when student and teacher embedding widths differ.
//!
//! Hidden layers are `affine → batchnorm → relu`. The embedding layer is a
//! plain affine map (no activation, no normalization) and the classifier is
//! one more affine map on top of it. Affine maps that feed a batchnorm carry
//! no bias since batchnorm removes it anyway.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Reader};
use crate::rng::{seeded, Normal, Stream};
use crate::tensor::{
    affine, affine_vjp, batchnorm, batchnorm_vjp, relu, relu_vjp, BatchNormCache, Mat, Mode, RunningStats, BN_EPS,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub use_2d_embedding: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.use_2d_embedding && self.embedding_dim != 2 {
            return Err(Error::Config(format!(
                "use_2d_embedding requires embedding_dim = 2, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }
}

fn hidden_prefix(i: usize) -> String {
    format!("hidden{i}")
}

pub const EMBED_W: &str = "embed.w";
pub const EMBED_B: &str = "embed.b";
pub const CLS_W: &str = "cls.w";
pub const CLS_B: &str = "cls.b";
pub const ADAPTER_PREFIX: &str = "adapter";

/// He-normal matrix, std = sqrt(2 / fan_in).
fn he_normal(normal: &mut Normal, fan_in: usize, fan_out: usize) -> Mat {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut m = Mat::zeros(fan_in, fan_out);
    for v in m.data_mut() {
        *v = std * normal.sample();
    }
    m
}

fn insert_batchnorm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.bn.gamma"), Mat::filled(1, dim, 1.0));
    store.insert(&format!("{prefix}.bn.beta"), Mat::zeros(1, dim));
    store.insert_buffer(&format!("{prefix}.bn.running_mean"), Mat::zeros(1, dim));
    store.insert_buffer(&format!("{prefix}.bn.running_var"), Mat::filled(1, dim, 1.0));
}

/// He-normal weights, zero biases, batchnorm `gamma = 1`, `beta = 0`.
/// Deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut normal = Normal::new(seeded(seed, Stream::Init));
    let mut store = ParamStore::new();
    let mut fan_in = spec.input_dim;
    for (i, &h) in spec.hidden_dims.iter().enumerate() {
        let p = hidden_prefix(i);
        store.insert(&format!("{p}.w"), he_normal(&mut normal, fan_in, h));
        insert_batchnorm(&mut store, &p, h);
        fan_in = h;
    }
    store.insert(EMBED_W, he_normal(&mut normal, fan_in, spec.embedding_dim));
    store.insert(EMBED_B, Mat::zeros(1, spec.embedding_dim));
    store.insert(CLS_W, he_normal(&mut normal, spec.embedding_dim, spec.num_classes));
    store.insert(CLS_B, Mat::zeros(1, spec.num_classes));
    Ok(store)
}

fn load_stats(params: &ParamStore, prefix: &str) -> Result<RunningStats> {
    let mean = params.buffer(&format!("{prefix}.bn.running_mean"))?;
    let var = params.buffer(&format!("{prefix}.bn.running_var"))?;
    let mut s = RunningStats::new(mean.cols());
    s.mean.copy_from_slice(mean.data());
    s.var.copy_from_slice(var.data());
    Ok(s)
}

fn store_stats(params: &mut ParamStore, prefix: &str, stats: &RunningStats) -> Result<()> {
    params
        .buffer_mut(&format!("{prefix}.bn.running_mean"))?
        .data_mut()
        .copy_from_slice(&stats.mean);
    params
        .buffer_mut(&format!("{prefix}.bn.running_var"))?
        .data_mut()
        .copy_from_slice(&stats.var);
    Ok(())
}

/// Runs `affine → batchnorm` for the block named `prefix`. Returns the
/// output, the batchnorm cache and the updated running statistics.
fn affine_bn(params: &ParamStore, prefix: &str, x: &Mat, mode: Mode) -> Result<(Mat, BatchNormCache, RunningStats)> {
    let z = affine(x, params.value(&format!("{prefix}.w"))?, None)?;
    let mut stats = load_stats(params, prefix)?;
    let gamma = params.value(&format!("{prefix}.bn.gamma"))?;
    let beta = params.value(&format!("{prefix}.bn.beta"))?;
    let (y, cache) = batchnorm(&z, gamma.data(), beta.data(), BN_EPS, mode, &mut stats)?;
    Ok((y, cache, stats))
}

/// Accumulates gradients for the block named `prefix`; returns `dX`.
fn affine_bn_vjp(params: &mut ParamStore, prefix: &str, x: &Mat, cache: &BatchNormCache, dy: &Mat) -> Result<Mat> {
    let bn = batchnorm_vjp(cache, dy)?;
    params.accumulate_grad(&format!("{prefix}.bn.gamma"), &Mat::row_vector(&bn.dgamma))?;
    params.accumulate_grad(&format!("{prefix}.bn.beta"), &Mat::row_vector(&bn.dbeta))?;
    let w_name = format!("{prefix}.w");
    let g = affine_vjp(x, params.value(&w_name)?, &bn.dx)?;
    params.accumulate_grad(&w_name, &g.dw)?;
    Ok(g.dx)
}

/// Forward state kept for [`backward_features`].
#[derive(Debug, Clone)]
pub struct FeatureTape {
    /// Input to each hidden block, then the input to the embedding layer.
    inputs: Vec<Mat>,
    bn: Vec<BatchNormCache>,
    pre_relu: Vec<Mat>,
}

fn features_impl(
    params: &ParamStore,
    spec: &MlpSpec,
    x: &Mat,
    mode: Mode,
) -> Result<(Mat, FeatureTape, Vec<RunningStats>)> {
    if x.cols() != spec.input_dim {
        return Err(Error::Shape {
            op: "forward_features",
            left: x.shape(),
            right: (x.rows(), spec.input_dim),
        });
    }
    let mut tape = FeatureTape {
        inputs: Vec::with_capacity(spec.hidden_dims.len() + 1),
        bn: Vec::with_capacity(spec.hidden_dims.len()),
        pre_relu: Vec::with_capacity(spec.hidden_dims.len()),
    };
    let mut stats = Vec::with_capacity(spec.hidden_dims.len());
    let mut h = x.clone();
    for i in 0..spec.hidden_dims.len() {
        let (z, cache, s) = affine_bn(params, &hidden_prefix(i), &h, mode)?;
        let a = relu(&z);
        tape.inputs.push(h);
        tape.bn.push(cache);
        tape.pre_relu.push(z);
        stats.push(s);
        h = a;
    }
    let emb = affine(&h, params.value(EMBED_W)?, Some(params.value(EMBED_B)?.data()))?;
    tape.inputs.push(h);
    Ok((emb, tape, stats))
}

/// Embeddings `f(X; Θ)`. Train mode uses batch statistics and folds them
/// into the running statistics held in `params`.
pub fn forward_features(params: &mut ParamStore, spec: &MlpSpec, x: &Mat, mode: Mode) -> Result<(Mat, FeatureTape)> {
    let (emb, tape, stats) = features_impl(params, spec, x, mode)?;
    if mode == Mode::Train {
        for (i, s) in stats.iter().enumerate() {
            store_stats(params, &hidden_prefix(i), s)?;
        }
    }
    Ok((emb, tape))
}

/// Eval-mode embeddings without touching `params`.
pub fn embed(params: &ParamStore, spec: &MlpSpec, x: &Mat) -> Result<Mat> {
    Ok(features_impl(params, spec, x, Mode::Eval)?.0)
}

/// Accumulates parameter gradients given `dL/d(embedding)`; returns `dL/dX`.
pub fn backward_features(params: &mut ParamStore, spec: &MlpSpec, tape: &FeatureTape, d_emb: &Mat) -> Result<Mat> {
    let n_hidden = spec.hidden_dims.len();
    let last_in = &tape.inputs[n_hidden];
    let g = affine_vjp(last_in, params.value(EMBED_W)?, d_emb)?;
    params.accumulate_grad(EMBED_W, &g.dw)?;
    params.accumulate_grad(EMBED_B, &Mat::row_vector(&g.db))?;
    let mut d = g.dx;
    for i in (0..n_hidden).rev() {
        let dz = relu_vjp(&tape.pre_relu[i], &d)?;
        d = affine_bn_vjp(params, &hidden_prefix(i), &tape.inputs[i], &tape.bn[i], &dz)?;
    }
    Ok(d)
}

/// Logits `g(emb; w)`; no softmax.
pub fn forward_logits(params: &ParamStore, spec: &MlpSpec, emb: &Mat) -> Result<Mat> {
    if emb.cols() != spec.embedding_dim {
        return Err(Error::Shape {
            op: "forward_logits",
            left: emb.shape(),
            right: (emb.rows(), spec.embedding_dim),
        });
    }
    affine(emb, params.value(CLS_W)?, Some(params.value(CLS_B)?.data()))
}

/// Accumulates classifier gradients; returns `dL/d(emb)`.
pub fn logits_vjp(params: &mut ParamStore, emb: &Mat, d_logits: &Mat) -> Result<Mat> {
    let g = affine_vjp(emb, params.value(CLS_W)?, d_logits)?;
    params.accumulate_grad(CLS_W, &g.dw)?;
    params.accumulate_grad(CLS_B, &Mat::row_vector(&g.db))?;
    Ok(g.dx)
}

/// Row-wise argmax, ties to the lowest index.
pub fn predict(logits: &Mat) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// projection adapter

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub enabled: bool,
}

impl AdapterSpec {
    /// Enabled exactly when the widths differ.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            enabled: in_dim != out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled != (self.in_dim != self.out_dim) {
            return Err(Error::Contract(format!(
                "adapter must be enabled iff widths differ ({} -> {}, enabled = {})",
                self.in_dim, self.out_dim, self.enabled
            )));
        }
        Ok(())
    }
}

/// Fully-connected projection followed by batchnorm. Empty store when the
/// adapter is disabled.
pub fn init_adapter(spec: &AdapterSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut store = ParamStore::new();
    if spec.enabled {
        let mut normal = Normal::new(seeded(seed, Stream::Adapter));
        store.insert(
            &format!("{ADAPTER_PREFIX}.w"),
            he_normal(&mut normal, spec.in_dim, spec.out_dim),
        );
        insert_batchnorm(&mut store, ADAPTER_PREFIX, spec.out_dim);
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct AdapterTape {
    input: Mat,
    bn: BatchNormCache,
}

fn check_adapter(spec: &AdapterSpec, emb: &Mat) -> Result<()> {
    spec.validate()?;
    if !spec.enabled {
        return Err(Error::Contract(
            "adapter is disabled; feed raw embeddings to the losses".into(),
        ));
    }
    if emb.cols() != spec.in_dim {
        return Err(Error::Shape {
            op: "adapt",
            left: emb.shape(),
            right: (emb.rows(), spec.in_dim),
        });
    }
    Ok(())
}

/// Projects student embeddings to the teacher's width.
pub fn adapt(params: &mut ParamStore, spec: &AdapterSpec, emb_s: &Mat, mode: Mode) -> Result<(Mat, AdapterTape)> {
    check_adapter(spec, emb_s)?;
    let (y, bn, stats) = affine_bn(params, ADAPTER_PREFIX, emb_s, mode)?;
    if mode == Mode::Train {
        store_stats(params, ADAPTER_PREFIX, &stats)?;
    }
    Ok((
        y,
        AdapterTape {
            input: emb_s.clone(),
            bn,
        },
    ))
}

/// Eval-mode projection without touching `params`.
pub fn adapt_eval(params: &ParamStore, spec: &AdapterSpec, emb_s: &Mat) -> Result<Mat> {
    check_adapter(spec, emb_s)?;
    Ok(affine_bn(params, ADAPTER_PREFIX, emb_s, Mode::Eval)?.0)
}

/// Accumulates adapter gradients; returns `dL/d(emb_s)`.
pub fn adapt_vjp(params: &mut ParamStore, tape: &AdapterTape, d_out: &Mat) -> Result<Mat> {
    affine_bn_vjp(params, ADAPTER_PREFIX, &tape.input, &tape.bn, d_out)
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"NDLABCK1";

/// A network spec with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn embed(&self, x: &Mat) -> Result<Mat> {
        embed(&self.params, &self.spec, x)
    }

    pub fn logits(&self, x: &Mat) -> Result<Mat> {
        forward_logits(&self.params, &self.spec, &self.embed(x)?)
    }

    /// Checkpoint bytes: magic, `u32` spec-JSON length, spec JSON, then the
    /// parameter store.
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not an ndlab checkpoint".into()));
        }
        let len = r.u32()? as usize;
        let spec: MlpSpec =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Data(format!("bad checkpoint spec: {e}")))?;
        spec.validate()?;
        let (params, used) = ParamStore::from_bytes(&bytes[r.pos..])?;
        if r.pos + used != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
