//! Dense autoencoder engine: forward/backward passes, reconstruction loss
//! with L2 weight decay, and the SGD / momentum / Adam optimizers.

mod checkpoint;
mod net;
mod optim;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Precision,
};
pub use net::{mse, Activation, Architecture, DenseNet, FlatParams, LayerShape, PROBE_ATTEMPTS};
pub use optim::{apply_step, Optimizer, OptimizerFamily, OptimizerSpec, SGDM_MOMENTUM};
pub use train::{epoch_order, mean_reconstruction_error, train_epoch, TrainConfig};

use crate::error::Result;

/// Builds the autoencoder for a 27- or 69-wide feature vector.
pub fn build_autoencoder(input_dim: usize, seed: u64) -> Result<DenseNet> {
    Ok(DenseNet::init(Architecture::autoencoder(input_dim)?, seed))
}
