use crate::error::{shape_err, Result};
use crate::tensorcore::{Graph, Scalar, Tensor, Var};

use super::pyramid::PyramidSpec;

/// Hidden and cell state of one MG-conv-LSTM layer, per level.
#[derive(Clone, Debug, PartialEq)]
pub struct MGMemoryState<T> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
}

/// All-zero state for `spec` at batch size `batch`.
pub fn init_state<T: Scalar>(spec: &PyramidSpec, batch: usize) -> MGMemoryState<T> {
    let zeros: Vec<Tensor<T>> = spec
        .levels()
        .iter()
        .map(|l| Tensor::zeros(l.shape(batch)))
        .collect();
    MGMemoryState {
        h: zeros.clone(),
        c: zeros,
    }
}

impl<T: Scalar> MGMemoryState<T> {
    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape().batch)
    }

    pub fn value_count(&self) -> usize {
        self.h.iter().chain(&self.c).map(Tensor::numel).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.h
            .iter()
            .chain(&self.c)
            .all(|t| t.data().iter().all(|v| *v == T::zero()))
    }

    pub fn check(&self, spec: &PyramidSpec) -> Result<()> {
        let batch = self.batch();
        if self.h.len() != spec.len() || self.c.len() != spec.len() {
            return shape_err(format!(
                "state has {} levels, layer expects {}",
                self.h.len(),
                spec.len()
            ));
        }
        for ((h, c), l) in self.h.iter().zip(&self.c).zip(spec.levels()) {
            if h.shape() != l.shape(batch) || c.shape() != l.shape(batch) {
                return shape_err(format!(
                    "state level {} / {} does not match {:?}",
                    h.shape(),
                    c.shape(),
                    l
                ));
            }
        }
        Ok(())
    }

    /// Records the state as non-trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<MemoryVars> {
        Ok(MemoryVars {
            h: self
                .h
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?,
            c: self
                .c
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<_>>()?,
        })
    }
}

/// Graph-bound form of [`MGMemoryState`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl MemoryVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> MGMemoryState<T> {
        MGMemoryState {
            h: self.h.iter().map(|v| g.value(*v).clone()).collect(),
            c: self.c.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }

    /// Same values, cut off from gradient flow.
    pub fn detached<T: Scalar>(&self, g: &mut Graph<T>) -> Result<MemoryVars> {
        Ok(MemoryVars {
            h: self.h.iter().map(|v| g.detach(*v)).collect::<Result<_>>()?,
            c: self.c.iter().map(|v| g.detach(*v)).collect::<Result<_>>()?,
        })
    }
}
