//! Training, evaluation and analysis on the synthetic task.

pub mod analysis;
pub mod io;
pub mod optim;
pub mod task;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ModelConfig, ModelError};
use crate::injection::InjectionConfig;
use crate::numeric::NumericError;
use crate::retrieval::{RetrievalError, DEFAULT_B, DEFAULT_K1};

pub use analysis::{
    dump_activations, gold_column_rate, standard_layer_sets, sweep_layers, sweep_topn, ActivationMatrix, GoldColumnReport,
    Sweep, SweepRow,
};
pub use task::{generate_dataset, McqExample, SyntheticTaskConfig, TaskData};
pub use train::{
    build_model, evaluate, prepare, run_experiment, train, train_step, EpochMetrics, EvalReport,
    PreparedExample, Retriever, RunOutcome, TrainReport,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("mode {0} is not supported here")]
    UnsupportedMode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<NumericError> for HarnessError {
    fn from(e: NumericError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep the knowledge retrieved before the first epoch.
    pub freeze_retrieval: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 30,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_retrieval: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(HarnessError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("train.epochs and train.batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err("train.lr must be finite and nonnegative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err("train.weight_decay must be finite and nonnegative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return err("train.clip_norm must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return err("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return err("train.eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalParams,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.injection.validate(self.model.num_layers)?;
        self.train.validate()
    }
}
