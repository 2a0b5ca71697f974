//! The trainable parsing network, its combined loss, training and inference.

mod infer;
mod loss;
mod network;
mod train;

pub use infer::{evaluate, evaluate_with, EvalReport, Prediction, ThresholdMetrics};
pub use loss::{combine_losses, semantic_targets, LossReport, LossTargets, LossTerms};
pub use network::{Bound, ChannelStats, FacadeRcnn, Forward, NECK_CHANNELS, ROI_SIZE};
pub use train::{train, EpochRecord, TrainReport};

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint};

/// The run config stored beside a checkpoint: `model.bin` → `model.toml`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

impl FacadeRcnn {
    /// Writes the parameters to `path` and the run config beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self.params(), path)?;
        self.config().save(&config_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let config = RunConfig::load(&config_path(path))?;
        let mut model = FacadeRcnn::new(config)?;
        load_checkpoint(model.params_mut(), path)?;
        Ok(model)
    }
}
