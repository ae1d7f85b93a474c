//! Residual convolutional classifier, its optimizer and training loop, and
//! a binary checkpoint format.
//!
//! Kernels are generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

mod checkpoint;
mod layers;
mod network;
mod optim;
mod scalar;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use network::{
    argmax_rows, softmax_rows, LossGrad, ModelParams, Network, ParamKind, ParamSpec, BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{lr_at, nesterov_step, LrBoost, TrainConfig};
pub use scalar::Scalar;
pub use train::{evaluate, predict, train, EpochRecord, TrainHistory, TrainOptions, TrainState};

use crate::error::{Error, Result};
use crate::spectral::Shape;

/// Architecture of the residual network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// Channel width of each stage.
    pub widths: Vec<usize>,
    /// Residual blocks per stage. A stage with zero blocks contributes
    /// nothing, so `widths = [w], blocks = [0]` is a single stem convolution
    /// followed by the classifier head.
    pub blocks: Vec<usize>,
    pub input: Shape,
    pub classes: usize,
    /// Without residual connections the blocks are plain conv stacks.
    pub residual: bool,
    #[serde(with = "crate::seed_serde")]
    pub seed: u64,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        ConvNetConfig {
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            input: Shape::new(3, 32, 32),
            classes: 10,
            residual: true,
            seed: 0,
        }
    }
}

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "widths ({}) and blocks ({}) must be non-empty and of equal length",
                self.widths.len(),
                self.blocks.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Config(format!("empty input shape {}", self.input)));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::Config(format!("class count {} outside 2..=256", self.classes)));
        }
        Ok(())
    }
}
