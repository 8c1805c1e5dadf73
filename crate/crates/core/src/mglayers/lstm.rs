use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamId, ParamStore, Scalar, Shape, Tensor, Var};

use super::init::uniform_kernel;
use super::pyramid::{assemble_for, Pyramid, PyramidSpec};
use super::state::MemoryVars;

/// Gate blocks of the fused kernels and bias, in channel order.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];

/// Weights of one pyramid level. `w_x`, `w_h` and `bias` hold the four gate
/// blocks `[i, f, c, o]` side by side along the output channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLevelParams {
    /// `(3, 3, Cin_assembled, 4C)`
    pub w_x: ParamId,
    /// `(3, 3, C, 4C)`
    pub w_h: ParamId,
    /// `(1, 1, 1, 4C)`
    pub bias: ParamId,
    /// Peephole vectors `(1, 1, 1, C)`, broadcast over space.
    pub peep_i: ParamId,
    pub peep_f: ParamId,
    pub peep_o: ParamId,
}

/// Multigrid convolutional LSTM layer.
#[derive(Clone, Debug)]
pub struct MGConvLSTMParams {
    pub input: PyramidSpec,
    pub output: PyramidSpec,
    pub levels: Vec<LstmLevelParams>,
    pub residual: bool,
}

/// Forget-gate bias at initialization.
pub const FORGET_BIAS_INIT: f64 = 1.0;

impl MGConvLSTMParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: &PyramidSpec,
        output: &PyramidSpec,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(output.len());
        for (j, l) in output.levels().iter().enumerate() {
            let cin = input.assembled_channels(l.rows, l.cols);
            if cin == 0 {
                return Err(Error::Shape(format!(
                    "{prefix}: output grid {}x{} has no neighbouring input level",
                    l.rows, l.cols
                )));
            }
            let c = l.channels;
            let w_x = store.add(format!("{prefix}.l{j}.w_x"), uniform_kernel(cin, 4 * c, rng))?;
            let w_h = store.add(format!("{prefix}.l{j}.w_h"), uniform_kernel(c, 4 * c, rng))?;
            let bias = store.add(
                format!("{prefix}.l{j}.bias"),
                Tensor::from_fn(Shape::new(1, 1, 1, 4 * c), |_, _, _, k| {
                    if k / c == 1 {
                        T::from_f64_lossy(FORGET_BIAS_INIT)
                    } else {
                        T::zero()
                    }
                }),
            )?;
            let peep = |store: &mut ParamStore<T>, g: &str| {
                store.add(
                    format!("{prefix}.l{j}.peep_{g}"),
                    Tensor::zeros(Shape::new(1, 1, 1, c)),
                )
            };
            let peep_i = peep(store, "i")?;
            let peep_f = peep(store, "f")?;
            let peep_o = peep(store, "o")?;
            levels.push(LstmLevelParams {
                w_x,
                w_h,
                bias,
                peep_i,
                peep_f,
                peep_o,
            });
        }
        Ok(MGConvLSTMParams {
            input: input.clone(),
            output: output.clone(),
            levels,
            residual,
        })
    }

    /// Closed-form scalar parameter count: per level
    /// `9·Cin·4C + 9·C·4C + 4C + 3C`.
    pub fn closed_form_count(input: &PyramidSpec, output: &PyramidSpec) -> usize {
        output
            .levels()
            .iter()
            .map(|l| {
                let cin = input.assembled_channels(l.rows, l.cols);
                let c = l.channels;
                9 * cin * 4 * c + 9 * c * 4 * c + 4 * c + 3 * c
            })
            .sum()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.levels
            .iter()
            .flat_map(|l| [l.w_x, l.w_h, l.bias, l.peep_i, l.peep_f, l.peep_o])
    }
}

/// One time step of the layer. Returns the output pyramid (hidden states,
/// plus the same-grid input when `residual` and channel counts agree) and
/// the new state.
pub fn mg_lstm_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MGConvLSTMParams,
    p_in: &Pyramid,
    state: &MemoryVars,
) -> Result<(Pyramid, MemoryVars)> {
    let batch = p_in.check(g, &params.input)?;
    let n = params.output.len();
    if state.h.len() != n || state.c.len() != n {
        return Err(Error::Shape(format!(
            "state has {} levels, layer has {n}",
            state.h.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut h_new = Vec::with_capacity(n);
    let mut c_new = Vec::with_capacity(n);
    for (j, (l, lp)) in params.output.levels().iter().zip(&params.levels).enumerate() {
        let (h_prev, c_prev) = (state.h[j], state.c[j]);
        let want = l.shape(batch);
        if g.shape(h_prev) != want || g.shape(c_prev) != want {
            return Err(Error::Shape(format!(
                "state level {j} is {}, layer expects {want}",
                g.shape(h_prev)
            )));
        }
        let (h, c) = lstm_cell(g, store, lp, l.channels, params, p_in, h_prev, c_prev, l.rows, l.cols)?;
        let mut y = h;
        if params.residual {
            if let Some(k) = params.input.find(l.rows, l.cols) {
                if params.input.level(k).channels == l.channels {
                    y = g.add(y, p_in.levels[k])?;
                }
            }
        }
        out.push(y);
        h_new.push(h);
        c_new.push(c);
    }
    Ok((
        Pyramid::new(out),
        MemoryVars {
            h: h_new,
            c: c_new,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn lstm_cell<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    lp: &LstmLevelParams,
    c: usize,
    params: &MGConvLSTMParams,
    p_in: &Pyramid,
    h_prev: Var,
    c_prev: Var,
    rows: usize,
    cols: usize,
) -> Result<(Var, Var)> {
    let x = assemble_for(g, p_in, &params.input, rows, cols)?;
    let w_x = g.param(store, lp.w_x)?;
    let w_h = g.param(store, lp.w_h)?;
    let bias = g.param(store, lp.bias)?;
    let zx = g.conv2d(x, w_x, Some(bias))?;
    let zh = g.conv2d(h_prev, w_h, None)?;
    let z = g.add(zx, zh)?;

    let zi = g.slice_channels(z, 0, c)?;
    let zf = g.slice_channels(z, c, c)?;
    let zc = g.slice_channels(z, 2 * c, c)?;
    let zo = g.slice_channels(z, 3 * c, c)?;

    let pi = g.param(store, lp.peep_i)?;
    let pf = g.param(store, lp.peep_f)?;
    let po = g.param(store, lp.peep_o)?;

    let ci = g.mul_channel(c_prev, pi)?;
    let ai = g.add(zi, ci)?;
    let i = g.sigmoid(ai)?;

    let cf = g.mul_channel(c_prev, pf)?;
    let af = g.add(zf, cf)?;
    let f = g.sigmoid(af)?;

    let cand = g.tanh(zc)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;

    let co = g.mul_channel(c_next, po)?;
    let ao = g.add(zo, co)?;
    let o = g.sigmoid(ao)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}
