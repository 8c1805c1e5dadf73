//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is a topological order by construction. [`Graph::backward`] walks the
//! record once in reverse and returns the gradient of a scalar loss with
//! respect to every trainable leaf.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, Error, Result};

use super::norm::{NormMode, NormState};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    MulChannel {
        x: usize,
        w: usize,
    },
    Unary(Unary, usize),
    Scale(usize, T),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    Sum(usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    BceLogits {
        logits: usize,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// The differentiation record.
pub struct Graph<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    graph: u32,
    leaves: HashMap<u32, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get(&v.index)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Parameter gradients only, detached from the graph they came from.
    pub fn into_param_map(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> T {
        let sq: T = self
            .params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum();
        sq.sqrt()
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Stable `softplus(v) = ln(1 + e^v)`.
#[inline]
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn im2col<T: Scalar>(x: &Tensor<T>, cols: &mut [T]) {
    let s = x.shape();
    let cin = s.channels;
    let row_len = 9 * cin;
    let xd = x.data();
    for b in 0..s.batch {
        for i in 0..s.rows {
            for j in 0..s.cols {
                let row = (b * s.rows + i) * s.cols + j;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for di in 0..3 {
                    for dj in 0..3 {
                        let dst = &mut dst_row[(di * 3 + dj) * cin..(di * 3 + dj + 1) * cin];
                        let ii = i as isize + di as isize - 1;
                        let jj = j as isize + dj as isize - 1;
                        if ii < 0 || jj < 0 || ii >= s.rows as isize || jj >= s.cols as isize {
                            dst.fill(T::zero());
                        } else {
                            let o = s.offset(b, ii as usize, jj as usize, 0);
                            dst.copy_from_slice(&xd[o..o + cin]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], s: Shape, dx: &mut [T]) {
    let cin = s.channels;
    let row_len = 9 * cin;
    for b in 0..s.batch {
        for i in 0..s.rows {
            for j in 0..s.cols {
                let row = (b * s.rows + i) * s.cols + j;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= s.rows as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= s.cols as isize {
                            continue;
                        }
                        let src = &src_row[(di * 3 + dj) * cin..(di * 3 + dj + 1) * cin];
                        let o = s.offset(b, ii as usize, jj as usize, 0);
                        for (d, &v) in dx[o..o + cin].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index as usize >= self.nodes.len() {
            return Err(Error::Graph(format!("node {v:?} is not in this record")));
        }
        Ok(v.index as usize)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index: index as u32,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("variable from another record");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant input")
    }

    /// Trainable leaf: `backward` reports a gradient for it.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, true, "variable input")?;
        self.nodes[v.index as usize].trainable = true;
        Ok(v)
    }

    /// Binds a stored parameter as a trainable leaf; repeated binds of the
    /// same id return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let v = self.variable(store.get(id).clone())?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// 3×3 convolution, zero padding 1, stride 1. Kernel shape is
    /// `(3, 3, Cin, Cout)`, bias `(1, 1, 1, Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if ws.batch != 3 || ws.rows != 3 {
            return shape_err(format!("kernel must be 3x3xCinxCout, got {ws}"));
        }
        if ws.cols != xs.channels {
            return shape_err(format!(
                "conv input has {} channels, kernel expects {}",
                xs.channels, ws.cols
            ));
        }
        if xs.rows == 0 || xs.cols == 0 {
            return shape_err("conv input has empty spatial extent");
        }
        let cout = ws.channels;
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs != Shape::new(1, 1, 1, cout) {
                return shape_err(format!("bias must be 1x1x1x{cout}, got {bs}"));
            }
        }
        self.nodes[xi].value.ensure_finite("conv2d input")?;
        let os = xs.with_channels(cout);
        let mut out = match bi {
            Some(bi) => {
                let bias = self.nodes[bi].value.data();
                let mut v = Vec::with_capacity(os.numel());
                for _ in 0..os.pixels() {
                    v.extend_from_slice(bias);
                }
                v
            }
            None => vec![T::zero(); os.numel()],
        };
        let k = 9 * xs.channels;
        let mut cols = vec![T::zero(); xs.pixels() * k];
        im2col(&self.nodes[xi].value, &mut cols);
        gemm(
            MatRef::new(&cols, xs.pixels(), k),
            MatRef::new(self.nodes[wi].value.data(), k, cout),
            T::one(),
            &mut out,
        );
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(os, out)?,
            Op::Conv2d { x: xi, w: wi, b: bi },
            rg,
            "conv2d output",
        )
    }

    /// 2×2 max-pool, stride 2. Ties go to the first element in row-major
    /// order within the window.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape();
        if !xs.rows.is_multiple_of(2) || !xs.cols.is_multiple_of(2) {
            return shape_err(format!("max-pool needs even spatial dims, got {xs}"));
        }
        let os = Shape::new(xs.batch, xs.rows / 2, xs.cols / 2, xs.channels);
        let xd = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for b in 0..os.batch {
            for i in 0..os.rows {
                for j in 0..os.cols {
                    for c in 0..os.channels {
                        let mut best = xs.offset(b, 2 * i, 2 * j, c);
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let o = xs.offset(b, 2 * i + di, 2 * j + dj, c);
                            if xd[o] > xd[best] {
                                best = o;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let rg = self.rg(xi);
        self.push(
            Tensor::from_vec(os, out)?,
            Op::MaxPool2 { x: xi, argmax },
            rg,
            "maxpool2 output",
        )
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let xs = xv.shape();
        let os = Shape::new(xs.batch, xs.rows * 2, xs.cols * 2, xs.channels);
        let c = xs.channels;
        let xd = xv.data();
        let mut out = Vec::with_capacity(os.numel());
        for b in 0..os.batch {
            for i in 0..os.rows {
                for j in 0..os.cols {
                    let o = xs.offset(b, i / 2, j / 2, 0);
                    out.extend_from_slice(&xd[o..o + c]);
                }
            }
        }
        let rg = self.rg(xi);
        self.push(Tensor::from_vec(os, out)?, Op::Upsample2 { x: xi }, rg, "upsample2 output")
    }

    /// Stacks channels of equally sized tensors in list order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::Invalid("concat of an empty list".into()))?;
        if idx.len() == 1 {
            return Ok(self.var(first));
        }
        let base = self.nodes[first].value.shape();
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.with_channels(0) != base.with_channels(0) {
                return shape_err(format!("concat of {s} with {base}"));
            }
            total += s.channels;
        }
        let os = base.with_channels(total);
        let mut out = Vec::with_capacity(os.numel());
        for p in 0..os.pixels() {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let c = t.shape().channels;
                out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(Tensor::from_vec(os, out)?, Op::Concat { xs: idx }, rg, "concat output")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.channel_slice(start, len)?;
        let rg = self.rg(xi);
        self.push(t, Op::SliceChannels { x: xi, start }, rg, "slice output")
    }

    fn binary_shapes(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return shape_err(format!("{what} of {sa} and {sb}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.binary_shapes(ai, bi, "add")?;
        let mut t = self.nodes[ai].value.clone();
        t.add_assign(&self.nodes[bi].value);
        let rg = self.rg(ai) || self.rg(bi);
        self.push(t, Op::Add(ai, bi), rg, "add output")
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.binary_shapes(ai, bi, "hadamard")?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.nodes[ai].value.shape(), data)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(t, Op::Mul(ai, bi), rg, "hadamard output")
    }

    /// Multiplies every pixel of `x` by the per-channel vector `w`
    /// (shape `(1, 1, 1, C)`).
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if ws != Shape::new(1, 1, 1, xs.channels) {
            return shape_err(format!("channel weights {ws} for input {xs}"));
        }
        let wd = self.nodes[wi].value.data();
        let c = xs.channels;
        let data = self.nodes[xi]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v * wd[k % c])
            .collect();
        let t = Tensor::from_vec(xs, data)?;
        let rg = self.rg(xi) || self.rg(wi);
        self.push(t, Op::MulChannel { x: xi, w: wi }, rg, "channel product output")
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = match kind {
            Unary::Sigmoid => self.nodes[xi].value.map(sigmoid),
            Unary::Tanh => self.nodes[xi].value.map(|v| v.tanh()),
            Unary::Relu => self.nodes[xi].value.map(|v| v.max(T::zero())),
        };
        let rg = self.rg(xi);
        self.push(t, Op::Unary(kind, xi), rg, "activation output")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.map(|v| v * alpha);
        let rg = self.rg(xi);
        self.push(t, Op::Scale(xi, alpha), rg, "scale output")
    }

    /// Per-channel batch normalization over (batch, rows, cols), followed by
    /// the affine map `gamma * x̂ + beta`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut NormState<T>,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        state.validate()?;
        let xs = self.nodes[xi].value.shape();
        let c = xs.channels;
        if state.channels() != c {
            return shape_err(format!(
                "batch-norm state has {} channels, input {xs}",
                state.channels()
            ));
        }
        for v in [gi, bi] {
            if self.nodes[v].value.shape() != Shape::new(1, 1, 1, c) {
                return shape_err("batch-norm scale/shift must be 1x1x1xC");
            }
        }
        let n = xs.pixels();
        if n == 0 {
            return Err(Error::Invalid("batch-norm over an empty batch".into()));
        }
        let xd = self.nodes[xi].value.data();
        let (mean, var) = match state.mode {
            NormMode::Training => {
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); c];
                for px in xd.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(px) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); c];
                for px in xd.chunks_exact(c) {
                    for k in 0..c {
                        let d = px[k] - mean[k];
                        var[k] = var[k] + d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nf);
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let g = self.nodes[gi].value.data();
        let bt = self.nodes[bi].value.data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (k, &v) in xd.iter().enumerate() {
            let ch = k % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + bt[ch]);
        }
        if state.mode == NormMode::Training {
            state.update(&mean, &var);
        }
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let mode = state.mode;
        self.push(
            Tensor::from_vec(xs, out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                mode,
            },
            rg,
            "batch-norm output",
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum();
        let rg = self.rg(xi);
        self.push(Tensor::scalar(s), Op::Sum(xi), rg, "sum")
    }

    /// Flattens each batch element and applies `x·W + b`; `W` has shape
    /// `(1, 1, rows*cols*channels, outputs)`, `b` `(1, 1, 1, outputs)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let features = xs.rows * xs.cols * xs.channels;
        if ws.batch != 1 || ws.rows != 1 || ws.cols != features {
            return shape_err(format!("dense weights {ws} for input {xs}"));
        }
        let outputs = ws.channels;
        if self.nodes[bi].value.shape() != Shape::new(1, 1, 1, outputs) {
            return shape_err("dense bias must be 1x1x1xO");
        }
        let mut out = Vec::with_capacity(xs.batch * outputs);
        for _ in 0..xs.batch {
            out.extend_from_slice(self.nodes[bi].value.data());
        }
        gemm(
            MatRef::new(self.nodes[xi].value.data(), xs.batch, features),
            MatRef::new(self.nodes[wi].value.data(), features, outputs),
            T::one(),
            &mut out,
        );
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        self.push(
            Tensor::from_vec(Shape::new(xs.batch, 1, 1, outputs), out)?,
            Op::Dense { x: xi, w: wi, b: bi },
            rg,
            "dense output",
        )
    }

    /// Binary cross-entropy from logits: summed over pixels and channels,
    /// averaged over the batch. An optional `weight` tensor masks or scales
    /// individual entries.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        weight: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.nodes[li].value.shape();
        if target.shape() != ls {
            return shape_err(format!("targets {} for logits {ls}", target.shape()));
        }
        if let Some(w) = weight {
            if w.shape() != ls {
                return shape_err(format!("loss weights {} for logits {ls}", w.shape()));
            }
        }
        if target.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::Invalid("cross-entropy targets must be 0 or 1".into()));
        }
        let z = self.nodes[li].value.data();
        let mut total = T::zero();
        for (k, (&zv, &y)) in z.iter().zip(target.data()).enumerate() {
            let w = weight.map_or(T::one(), |w| w.data()[k]);
            if w != T::zero() {
                total = total + w * (softplus(zv) - zv * y);
            }
        }
        let loss = total / T::from_usize(ls.batch.max(1)).unwrap();
        let rg = self.rg(li);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits: li,
                target: target.clone(),
                weight: weight.cloned(),
            },
            rg,
            "cross-entropy loss",
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the record.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.shape() != Shape::scalar() {
            return Err(Error::Graph(format!(
                "loss must be scalar, got {}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::scalar(T::one()));
        let mut leaves = HashMap::new();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if node.trainable {
                    leaves.insert(i as u32, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if node.trainable {
                leaves.insert(i as u32, g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        // trainable leaves created after the loss never saw it
        for (i, node) in self.nodes.iter().enumerate().skip(li + 1) {
            if node.trainable {
                leaves.insert(i as u32, Tensor::zeros(node.value.shape()));
            }
        }

        let mut params = BTreeMap::new();
        for (id, v) in &self.bound {
            if let Some(t) = leaves.get(&v.index) {
                params.insert(*id, t.clone());
            }
        }
        Ok(Gradients {
            graph: self.id,
            leaves,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, delta: Tensor<T>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates into `grads[i]` in place via `f`, creating a zero
    /// gradient first if needed.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        i: usize,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let g = grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
        f(g.data_mut());
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let xs = xv.shape();
                let wv = &self.nodes[*w].value;
                let cout = wv.shape().channels;
                let k = 9 * xs.channels;
                let rows = xs.pixels();
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for px in gd.chunks_exact(cout) {
                            for (d, &v) in db.iter_mut().zip(px) {
                                *d = *d + v;
                            }
                        }
                    });
                }
                if self.rg(*w) {
                    let mut cols = vec![T::zero(); rows * k];
                    im2col(xv, &mut cols);
                    self.accumulate_with(grads, *w, |dw| {
                        gemm(
                            MatRef::new(&cols, rows, k).t(),
                            MatRef::new(gd, rows, cout),
                            T::one(),
                            dw,
                        );
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * k];
                    gemm(
                        MatRef::new(gd, rows, cout),
                        MatRef::new(wv.data(), k, cout).t(),
                        T::zero(),
                        &mut dcols,
                    );
                    self.accumulate_with(grads, *x, |dx| col2im_add(&dcols, xs, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&a, &v) in argmax.iter().zip(gd) {
                        dx[a as usize] = dx[a as usize] + v;
                    }
                });
            }
            Op::Upsample2 { x } => {
                let xs = self.nodes[*x].value.shape();
                let os = g.shape();
                let c = xs.channels;
                self.accumulate_with(grads, *x, |dx| {
                    for b in 0..os.batch {
                        for ii in 0..os.rows {
                            for jj in 0..os.cols {
                                let src = os.offset(b, ii, jj, 0);
                                let dst = xs.offset(b, ii / 2, jj / 2, 0);
                                for k in 0..c {
                                    dx[dst + k] = dx[dst + k] + gd[src + k];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { xs } => {
                let total = g.shape().channels;
                let mut start = 0;
                for &x in xs {
                    let c = self.nodes[x].value.shape().channels;
                    self.accumulate_with(grads, x, |dx| {
                        for (p, px) in gd.chunks_exact(total).enumerate() {
                            for k in 0..c {
                                dx[p * c + k] = dx[p * c + k] + px[start + k];
                            }
                        }
                    });
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let total = self.nodes[*x].value.shape().channels;
                let c = g.shape().channels;
                self.accumulate_with(grads, *x, |dx| {
                    for (p, px) in gd.chunks_exact(c).enumerate() {
                        for k in 0..c {
                            let o = p * total + start + k;
                            dx[o] = dx[o] + px[k];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate_with(grads, *a, |da| {
                    for k in 0..gd.len() {
                        da[k] = da[k] + gd[k] * bv[k];
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for k in 0..gd.len() {
                        db[k] = db[k] + gd[k] * av[k];
                    }
                });
            }
            Op::MulChannel { x, w } => {
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let c = wv.len();
                self.accumulate_with(grads, *x, |dx| {
                    for k in 0..gd.len() {
                        dx[k] = dx[k] + gd[k] * wv[k % c];
                    }
                });
                self.accumulate_with(grads, *w, |dw| {
                    for k in 0..gd.len() {
                        dw[k % c] = dw[k % c] + gd[k] * xv[k];
                    }
                });
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                let xv = self.nodes[*x].value.data();
                self.accumulate_with(grads, *x, |dx| match kind {
                    Unary::Sigmoid => {
                        for k in 0..gd.len() {
                            dx[k] = dx[k] + gd[k] * y[k] * (T::one() - y[k]);
                        }
                    }
                    Unary::Tanh => {
                        for k in 0..gd.len() {
                            dx[k] = dx[k] + gd[k] * (T::one() - y[k] * y[k]);
                        }
                    }
                    Unary::Relu => {
                        for k in 0..gd.len() {
                            if xv[k] > T::zero() {
                                dx[k] = dx[k] + gd[k];
                            }
                        }
                    }
                });
            }
            Op::Scale(x, alpha) => {
                let alpha = *alpha;
                self.accumulate_with(grads, *x, |dx| {
                    for k in 0..gd.len() {
                        dx[k] = dx[k] + gd[k] * alpha;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let c = inv_std.len();
                let gam = self.nodes[*gamma].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for k in 0..gd.len() {
                    sum_g[k % c] = sum_g[k % c] + gd[k];
                    sum_gx[k % c] = sum_gx[k % c] + gd[k] * xhat[k];
                }
                self.accumulate_with(grads, *beta, |db| {
                    for k in 0..c {
                        db[k] = db[k] + sum_g[k];
                    }
                });
                self.accumulate_with(grads, *gamma, |dg| {
                    for k in 0..c {
                        dg[k] = dg[k] + sum_gx[k];
                    }
                });
                let n = T::from_usize(gd.len() / c).unwrap();
                self.accumulate_with(grads, *x, |dx| match mode {
                    NormMode::Training => {
                        for k in 0..gd.len() {
                            let ch = k % c;
                            // d x̂ = g·γ; Σ d x̂ = γ·Σg; Σ d x̂·x̂ = γ·Σ g·x̂
                            let term = n * gd[k] - sum_g[ch] - xhat[k] * sum_gx[ch];
                            dx[k] = dx[k] + gam[ch] * inv_std[ch] * term / n;
                        }
                    }
                    NormMode::Eval => {
                        for k in 0..gd.len() {
                            let ch = k % c;
                            dx[k] = dx[k] + gd[k] * gam[ch] * inv_std[ch];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate_with(grads, *x, |dx| dx.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Dense { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let xs = xv.shape();
                let features = xs.rows * xs.cols * xs.channels;
                let outputs = g.shape().channels;
                self.accumulate_with(grads, *b, |db| {
                    for row in gd.chunks_exact(outputs) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                });
                if self.rg(*w) {
                    self.accumulate_with(grads, *w, |dw| {
                        gemm(
                            MatRef::new(xv.data(), xs.batch, features).t(),
                            MatRef::new(gd, xs.batch, outputs),
                            T::one(),
                            dw,
                        )
                    });
                }
                if self.rg(*x) {
                    let wv = self.nodes[*w].value.data();
                    self.accumulate_with(grads, *x, |dx| {
                        gemm(
                            MatRef::new(gd, xs.batch, outputs),
                            MatRef::new(wv, features, outputs).t(),
                            T::one(),
                            dx,
                        )
                    });
                }
            }
            Op::BceLogits {
                logits,
                target,
                weight,
            } => {
                let z = self.nodes[*logits].value.data();
                let scale = gd[0] / T::from_usize(target.shape().batch.max(1)).unwrap();
                let y = target.data();
                self.accumulate_with(grads, *logits, |dz| {
                    for k in 0..z.len() {
                        let w = weight.as_ref().map_or(T::one(), |w| w.data()[k]);
                        dz[k] = dz[k] + scale * w * (sigmoid(z[k]) - y[k]);
                    }
                });
            }
        }
        Ok(())
    }
}
