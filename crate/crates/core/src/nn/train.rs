use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::DenseNet;
use super::optim::{apply_step, Optimizer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_indexed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// L2 weight on the squared weight-matrix entries.
    pub l2: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            l2: 1e-5,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config("l2 must be a non-negative number"));
        }
        Ok(())
    }
}

/// Row order for global epoch `epoch`, reseeded from `(shuffle_seed, epoch)`.
pub fn epoch_order(rows: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows).collect();
    let mut rng = rng_from(derive_indexed(shuffle_seed, "epoch", epoch));
    idx.shuffle(&mut rng);
    idx
}

/// One pass over `data` in shuffled mini-batches; the last partial batch is
/// kept. Returns the mean batch loss.
pub fn train_epoch(
    net: &mut DenseNet,
    opt: &mut Optimizer,
    data: &Matrix,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    let order = epoch_order(data.rows(), cfg.shuffle_seed, epoch);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let rows: Vec<&[f64]> = chunk.iter().map(|&i| data.row(i)).collect();
        let (loss, grad) = net.gradient(&rows, cfg.l2)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss is {loss} in epoch {epoch}")));
        }
        let arch = net.architecture().clone();
        apply_step(opt, net.params_mut(), &grad, &arch)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Mean per-row reconstruction error over `data`.
pub fn mean_reconstruction_error(net: &DenseNet, data: &Matrix) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    for row in data.iter_rows() {
        total += net.reconstruction_error(row)?;
    }
    Ok(total / data.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, OptimizerSpec};

    #[test]
    fn orders_are_permutations_and_reseeded() {
        let a = epoch_order(50, 3, 0);
        let b = epoch_order(50, 3, 1);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 3, 0));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let arch = Architecture::autoencoder(27).unwrap();
        let data = Matrix::from_rows(27, (0..70).map(|i| vec![(i % 7) as f64 / 7.0; 27])).unwrap();
        let cfg = TrainConfig { shuffle_seed: 9, ..Default::default() };
        let run = || {
            let mut net = DenseNet::init(arch.clone(), 5);
            let mut opt = Optimizer::new(OptimizerSpec::adam1(1e-3), arch.param_count());
            for e in 0..3 {
                train_epoch(&mut net, &mut opt, &data, &cfg, e).unwrap();
            }
            net.flatten()
        };
        assert_eq!(run().0, run().0);
    }

    #[test]
    fn overflowing_loss_is_numeric_error() {
        let arch = Architecture::autoencoder(27).unwrap();
        let mut net = DenseNet::init(arch.clone(), 1);
        net.params_mut().0.iter_mut().for_each(|p| *p = 1e200);
        let data = Matrix::from_rows(27, vec![vec![1.0; 27]; 4]).unwrap();
        let mut opt = Optimizer::new(OptimizerSpec::sgd(0.1), arch.param_count());
        let err = train_epoch(&mut net, &mut opt, &data, &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { l2: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
