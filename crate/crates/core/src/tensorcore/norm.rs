use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Training,
    /// Normalize with the running estimates.
    Eval,
}

/// Running statistics and hyperparameters of one batch-normalization site.
///
/// The per-channel scale and shift are trainable and live in the parameter
/// store; they are passed to [`Graph::batchnorm`](super::Graph::batchnorm)
/// as variables.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: NormMode,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(DEFAULT_EPS),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
            mode: NormMode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= T::zero() {
            return Err(Error::Invalid("batch-norm epsilon must be positive".into()));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::Invalid("negative running variance".into()));
        }
        if self.running_mean.len() != self.running_var.len() {
            return Err(Error::Invalid("running statistics length mismatch".into()));
        }
        Ok(())
    }

    /// Folds one batch's statistics into the running estimates.
    pub(crate) fn update(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = m * self.running_mean[c] + keep * mean[c];
            self.running_var[c] = m * self.running_var[c] + keep * var[c];
        }
    }
}
