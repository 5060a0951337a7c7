//! Gradient-based robust training: iterated FGSM, the consistency loss on
//! input gradients, stochastic block masking, and the training loop that
//! combines them.

pub mod config;
pub mod consistency;
pub mod fgsm;
pub mod masking;
pub mod train;

use thiserror::Error;

use crate::net::NetError;

pub use config::{ConsistencyConfig, FgsmConfig, LrSchedule, MaskSpec, Strategy, TargetMode, TrainConfig};
pub use consistency::{consistency_graph, consistency_loss, ConsistencyParts};
pub use fgsm::fgsm_attack;
pub use masking::{
    apply_mask, blocks_to_mask, draw_mask_params, partition_blocks, select_blocks, select_mask, Block, MaskBranch,
    MaskDraw, MaskSelection,
};
pub use train::{clip_global_norm, evaluate, masking_active, train, write_log_csv, Dataset, Evaluation, LogRow, TrainOutcome};

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("greedy masking needs an input gradient")]
    MissingGradient,
    #[error("gradient has {actual} voxels, volume has {expected}")]
    GradientShape { expected: usize, actual: usize },
    #[error("block id {id} out of range ({num_blocks} blocks)")]
    BlockOutOfRange { id: usize, num_blocks: usize },
    #[error("training data must contain both classes")]
    SingleClassDataset,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(String),
}

impl RobustError {
    pub(crate) fn config(field: &'static str, reason: &str) -> Self {
        RobustError::Config {
            field,
            reason: reason.to_string(),
        }
    }
}

impl From<crate::autograd::AutogradError> for RobustError {
    fn from(e: crate::autograd::AutogradError) -> Self {
        RobustError::Net(e.into())
    }
}
