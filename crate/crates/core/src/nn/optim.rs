use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::net::{Architecture, FlatParams};
use crate::error::{Error, Result};

/// Optimizer families with their fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerFamily {
    /// Plain SGD.
    Sgd,
    /// SGD with momentum 0.9.
    Sgdm,
    /// Adam, beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam1,
    /// Adam, beta1 = 0.9, beta2 = 0.99, eps = 1e-3.
    Adam2,
}

pub const SGDM_MOMENTUM: f64 = 0.9;

impl OptimizerFamily {
    /// `(beta1, beta2, eps)` for the Adam variants.
    pub fn adam_params(self) -> Option<(f64, f64, f64)> {
        match self {
            OptimizerFamily::Adam1 => Some((0.9, 0.999, 1e-8)),
            OptimizerFamily::Adam2 => Some((0.9, 0.99, 1e-3)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerFamily::Sgd => "SGD",
            OptimizerFamily::Sgdm => "SGDm",
            OptimizerFamily::Adam1 => "Adam1",
            OptimizerFamily::Adam2 => "Adam2",
        }
    }
}

impl fmt::Display for OptimizerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerFamily::Sgd),
            "sgdm" => Ok(OptimizerFamily::Sgdm),
            "adam1" => Ok(OptimizerFamily::Adam1),
            "adam2" => Ok(OptimizerFamily::Adam2),
            _ => Err(Error::config(format!("unknown optimizer `{s}`"))),
        }
    }
}

/// An optimizer family with its learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub family: OptimizerFamily,
    pub lr: f64,
}

impl OptimizerSpec {
    pub fn new(family: OptimizerFamily, lr: f64) -> Self {
        OptimizerSpec { family, lr }
    }
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerFamily::Sgd, lr)
    }
    pub fn sgdm(lr: f64) -> Self {
        Self::new(OptimizerFamily::Sgdm, lr)
    }
    pub fn adam1(lr: f64) -> Self {
        Self::new(OptimizerFamily::Adam1, lr)
    }
    pub fn adam2(lr: f64) -> Self {
        Self::new(OptimizerFamily::Adam2, lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "{} learning rate must be positive, got {}",
                self.family, self.lr
            )));
        }
        Ok(())
    }
}

impl fmt::Display for OptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.family, self.lr)
    }
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, n_params: usize) -> Self {
        let (first, second) = match spec.family {
            OptimizerFamily::Sgd => (Vec::new(), Vec::new()),
            OptimizerFamily::Sgdm => (vec![0.0; n_params], Vec::new()),
            OptimizerFamily::Adam1 | OptimizerFamily::Adam2 => {
                (vec![0.0; n_params], vec![0.0; n_params])
            }
        };
        Optimizer {
            spec,
            first,
            second,
            steps: 0,
        }
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place. On a non-finite result returns the first
    /// offending flat index; parameters are left updated.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), grad.len(), "parameter/gradient length");
        self.steps += 1;
        let lr = self.spec.lr;
        match self.spec.family {
            OptimizerFamily::Sgd => {
                for (w, g) in params.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            OptimizerFamily::Sgdm => {
                for ((w, g), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()) {
                    *v = SGDM_MOMENTUM * *v + g;
                    *w -= lr * *v;
                }
            }
            OptimizerFamily::Adam1 | OptimizerFamily::Adam2 => {
                let (b1, b2, eps) = self.spec.family.adam_params().expect("adam family");
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (i, (w, g)) in params.iter_mut().zip(grad).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        match params.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(i),
            None => Ok(()),
        }
    }
}

/// Applies one optimizer step to `params`, naming the layer on numeric failure.
pub fn apply_step(
    opt: &mut Optimizer,
    params: &mut FlatParams,
    grad: &FlatParams,
    arch: &Architecture,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    opt.step(params, grad).map_err(|i| {
        Error::numeric(format!(
            "non-finite parameter at index {i} in layer {} after {} step",
            arch.layer_of(i),
            opt.spec.family
        ))
    })
}
