#![allow(dead_code)]

use ndlab::exp::ExperimentConfig;
use ndlab::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-scale, scale)`.
pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

/// Small mixture problem that trains in well under a second.
pub const TINY_CONFIG: &str = r#"
seeds = [3, 4]

[data.mixture]
classes = 3
dim = 4
n_per_class = 30
separation = 6.0
noise_std = 0.5
seed = 7

[teacher]
hidden_dims = [16]
embedding_dim = 4

[student]
hidden_dims = [12]
embedding_dim = 4

[teacher_train]
epochs = 4
batch_size = 16
lr_initial = 0.05
lr_milestones = [3]

[student_train]
epochs = 4
batch_size = 16
lr_initial = 0.02
lr_milestones = [3]
lr_warmup_epochs = 1

[distill]
beta = 0.5

[sweeps]
beta_grid = [0.0, 0.5]
alpha_grid = [0.5, 1.0]
m_values = [0.0, 0.5]
sifn_r = [0.5, 1.0]
"#;

pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY_CONFIG).unwrap()
}

/// Tiny config with a student whose embedding width differs from the
/// teacher's, so distillation trains a projection adapter.
pub fn tiny_config_with_adapter() -> ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.student.embedding_dim = 3;
    cfg
}
