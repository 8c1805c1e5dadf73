use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensorcore::{Graph, NormMode, NormState, ParamId, ParamStore, Scalar, Shape, Tensor};

use super::init::uniform_kernel;
use super::pyramid::{assemble_for, Pyramid, PyramidSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug)]
pub struct LevelNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormState<T>,
}

#[derive(Clone, Debug)]
pub struct ConvLevelParams<T> {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub norm: Option<LevelNorm<T>>,
}

/// Multigrid convolution: per output level, a 3×3 filter bank over the
/// concatenated neighbouring scales of the input pyramid.
#[derive(Clone, Debug)]
pub struct MGConvParams<T> {
    pub input: PyramidSpec,
    pub output: PyramidSpec,
    pub levels: Vec<ConvLevelParams<T>>,
    pub residual: bool,
    pub activation: Activation,
}

impl<T: Scalar> MGConvParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: &PyramidSpec,
        output: &PyramidSpec,
        residual: bool,
        norm: bool,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(output.len());
        for (j, l) in output.levels().iter().enumerate() {
            let cin = input.assembled_channels(l.rows, l.cols);
            if cin == 0 {
                return Err(crate::Error::Shape(format!(
                    "{prefix}: output grid {}x{} has no neighbouring input level",
                    l.rows, l.cols
                )));
            }
            let kernel = store.add(
                format!("{prefix}.l{j}.kernel"),
                uniform_kernel(cin, l.channels, rng),
            )?;
            let bias = store.add(
                format!("{prefix}.l{j}.bias"),
                Tensor::zeros(Shape::new(1, 1, 1, l.channels)),
            )?;
            let norm = if norm {
                Some(LevelNorm {
                    gamma: store.add(
                        format!("{prefix}.l{j}.bn_scale"),
                        Tensor::full(Shape::new(1, 1, 1, l.channels), T::one()),
                    )?,
                    beta: store.add(
                        format!("{prefix}.l{j}.bn_shift"),
                        Tensor::zeros(Shape::new(1, 1, 1, l.channels)),
                    )?,
                    state: NormState::new(l.channels),
                })
            } else {
                None
            };
            levels.push(ConvLevelParams { kernel, bias, norm });
        }
        Ok(MGConvParams {
            input: input.clone(),
            output: output.clone(),
            levels,
            residual,
            activation,
        })
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        for l in &mut self.levels {
            if let Some(n) = &mut l.norm {
                n.state.mode = mode;
            }
        }
    }
}

/// conv → optional batch norm → activation → optional identity residual,
/// independently for every output level.
pub fn mg_conv_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &mut MGConvParams<T>,
    p: &Pyramid,
) -> Result<Pyramid> {
    p.check(g, &params.input)?;
    let mut out = Vec::with_capacity(params.output.len());
    for (l, lp) in params.output.levels().iter().zip(&mut params.levels) {
        let h = assemble_for(g, p, &params.input, l.rows, l.cols)?;
        let w = g.param(store, lp.kernel)?;
        let b = g.param(store, lp.bias)?;
        let mut y = g.conv2d(h, w, Some(b))?;
        if let Some(n) = &mut lp.norm {
            let gamma = g.param(store, n.gamma)?;
            let beta = g.param(store, n.beta)?;
            y = g.batchnorm(y, gamma, beta, &mut n.state)?;
        }
        if params.activation == Activation::Relu {
            y = g.relu(y)?;
        }
        if params.residual {
            if let Some(j) = params.input.find(l.rows, l.cols) {
                if params.input.level(j).channels == l.channels {
                    y = g.add(y, p.levels[j])?;
                }
            }
        }
        out.push(y);
    }
    Ok(Pyramid::new(out))
}
