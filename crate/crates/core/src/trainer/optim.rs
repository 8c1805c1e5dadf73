use serde::{Deserialize, Serialize};

use crate::assemblies::GradMap;
use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamStore, Scalar, Tensor};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_CLIP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: DEFAULT_LR,
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Invalid(format!("decay {} must lie in [0, 1)", self.decay)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Invalid(format!("epsilon {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// Squared-gradient accumulators, one per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct RMSPropState<T> {
    pub config: RmsPropConfig,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> RMSPropState<T> {
    pub fn new(store: &ParamStore<T>, config: RmsPropConfig) -> Result<Self> {
        config.validate()?;
        Ok(RMSPropState {
            config,
            v: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        })
    }

    /// Checks alignment with `store` and `v ≥ 0`.
    pub fn check(&self, store: &ParamStore<T>) -> Result<()> {
        self.config.validate()?;
        if self.v.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} accumulators for {} parameters",
                self.v.len(),
                store.len()
            )));
        }
        for ((_, name, p), v) in store.iter().zip(&self.v) {
            if p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "accumulator {} for parameter {name} {}",
                    v.shape(),
                    p.shape()
                )));
            }
            if v.data().iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
                return Err(Error::Invalid(format!("accumulator for {name} is not finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// One RMSProp update. Parameters without a gradient entry see `g = 0`.
pub fn rmsprop_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradMap<T>,
    st: &mut RMSPropState<T>,
) -> Result<()> {
    st.check(store)?;
    for (id, g) in grads {
        if id.0 >= store.len() {
            return Err(Error::Invalid(format!("gradient for unknown parameter {}", id.0)));
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Shape(format!(
                "gradient {} for parameter {} {}",
                g.shape(),
                store.name(*id),
                store.get(*id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
        }
    }
    let rho = T::from_f64_lossy(st.config.decay);
    let one_m = T::from_f64_lossy(1.0 - st.config.decay);
    let lr = T::from_f64_lossy(st.config.lr);
    let eps = T::from_f64_lossy(st.config.eps);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let v = st.v[id.0].data_mut();
        match grads.get(&id) {
            None => v.iter_mut().for_each(|x| *x = rho * *x),
            Some(g) => {
                let p = store.get_mut(id).data_mut();
                for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vv = rho * *vv + one_m * gv * gv;
                    *pv = *pv - lr * gv / (vv.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradMap<T>, max_norm: f64) -> T {
    let sq: T = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| v * v)
        .sum();
    let norm = sq.sqrt();
    let max = T::from_f64_lossy(max_norm);
    if norm > max && norm.is_finite() {
        let s = max / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Pixel-wise cross-entropy from logits, summed over entries and averaged
/// over the batch.
pub fn bce_logits_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone())?;
    let l = g.bce_with_logits(z, target, None)?;
    g.value(l).item()
}
