//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, load_train_csv, make_mixture, LabeledData, MixtureSpec};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::nets::MlpSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Mixture(MixtureSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub header: bool,
}

/// Network shape; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub use_2d_embedding: bool,
}

impl NetConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            num_classes,
            use_2d_embedding: self.use_2d_embedding,
        }
    }
}

fn default_beta_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_m_values() -> Vec<f64> {
    vec![-0.5, 0.0, 0.5]
}

fn default_sifn_r() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0]
}

/// Grids for the sweep commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_m_values")]
    pub m_values: Vec<f64>,
    #[serde(default = "default_sifn_r")]
    pub sifn_r: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            beta_grid: default_beta_grid(),
            alpha_grid: default_alpha_grid(),
            m_values: default_m_values(),
            sifn_r: default_sifn_r(),
        }
    }
}

/// A whole experiment. The `seed` fields of the two training sections are
/// replaced by each entry of `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

/// The built-in desk-scale recipe.
pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative CSV paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let DataSource::Csv(csv) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            csv.train = base.join(&csv.train);
            if let Some(t) = &mut csv.test {
                *t = base.join(&*t);
            }
        }
        Ok(cfg)
    }

    pub fn default_recipe() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("built-in config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if let DataSource::Mixture(m) = &self.data {
            m.validate()?;
        }
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        self.distill.validate()?;
        let s = &self.sweeps;
        if let Some(m) = s.m_values.iter().find(|m| !(**m > -1.0) || !m.is_finite()) {
            return Err(Error::Config(format!("m values must be > -1, got {m}")));
        }
        if let Some(r) = s.sifn_r.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("sifn r values must be > 0, got {r}")));
        }
        if let Some(v) = s
            .alpha_grid
            .iter()
            .chain(&s.beta_grid)
            .find(|v| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config(format!("alpha/beta grid values must be >= 0, got {v}")));
        }
        Ok(())
    }

    /// Train and test splits.
    pub fn load_data(&self) -> Result<(LabeledData, LabeledData)> {
        match &self.data {
            DataSource::Mixture(m) => make_mixture(m),
            DataSource::Csv(csv) => {
                let train = load_train_csv(&csv.train, csv.header)?;
                let test = match &csv.test {
                    Some(p) => {
                        let t = load_csv(p, csv.header)?;
                        if t.num_classes > train.num_classes || t.dim() != train.dim() {
                            return Err(Error::Data(format!(
                                "test split {} does not match the training split",
                                p.display()
                            )));
                        }
                        LabeledData::new(t.x, t.y, train.num_classes)?
                    }
                    None => LabeledData::new(crate::tensor::Mat::zeros(0, train.dim()), vec![], train.num_classes)?,
                };
                Ok((train, test))
            }
        }
    }

    pub fn teacher_spec(&self, data: &LabeledData) -> MlpSpec {
        self.teacher.spec(data.dim(), data.num_classes)
    }

    pub fn student_spec(&self, data: &LabeledData) -> MlpSpec {
        self.student.spec(data.dim(), data.num_classes)
    }

    pub fn teacher_train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.teacher_train.clone()
        }
    }

    pub fn student_train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.student_train.clone()
        }
    }
}
