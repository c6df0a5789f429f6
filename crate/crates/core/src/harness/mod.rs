//! Training loop, evaluation, configuration and the metrics stream.

mod config;
mod train;

use std::path::Path;

use thiserror::Error;

pub use config::TrainConfig;
pub use train::{
    augment_target, build_step, evaluate, lr_schedule, predict, prepare_data, run_experiment, run_seeds, MetricsRecord,
    RunResult, SeedSummary, StepGraph, StepLosses, TargetViews, Trainer,
};

use crate::autograd::checkpoint::CheckpointError;
use crate::autograd::AutogradError;
use crate::data::DataError;
use crate::losses::LossError;
use crate::pseudo::PseudoError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "non-finite loss at iteration {iteration}: l_cls={} l_adv={} l_u={} l_d={} total={}",
        losses.l_cls, losses.l_adv, losses.l_u, losses.l_d, losses.total
    )]
    NonFinite { iteration: usize, losses: StepLosses },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
