use rand::Rng;

use crate::error::{Error, Result};
use crate::mglayers::{
    init_state, mg_conv_forward, mg_lstm_forward, uniform_dense, Activation, MGConvLSTMParams,
    MGConvParams, MGMemoryState, MemoryVars, Pyramid, PyramidSpec,
};
use crate::tensorcore::{Graph, NormMode, NormState, ParamId, ParamStore, Scalar, Shape, Tensor, Var};

use super::spec::{HeadKind, LayerKind, NetworkSpec, StackSpec};

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Lstm(MGConvLSTMParams),
    Conv(MGConvParams<T>),
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub level: usize,
    pub kind: HeadKind,
    /// Pixel head: `(3, 3, C, 1)`; vector head: `(1, 1, features, outputs)`.
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Built form of a [`StackSpec`].
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub name: String,
    pub spec: StackSpec,
    pub layers: Vec<Layer<T>>,
    pub head: Option<Head>,
}

impl<T: Scalar> Stack<T> {
    /// `extra[k]` is merged into layer `k`'s input (readers see the writer).
    fn build(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &StackSpec,
        extra: Option<&[PyramidSpec]>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut prev = spec.input_pyramid();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (k, ls) in spec.layers.iter().enumerate() {
            let input = match extra.and_then(|e| e.get(k)) {
                Some(w) => prev.merged(w)?,
                None => prev.clone(),
            };
            let prefix = format!("{name}.{k}");
            layers.push(match ls.kind {
                LayerKind::Lstm => {
                    if ls.norm {
                        return Err(Error::Invalid(format!(
                            "{prefix}: batch normalization is only supported on MG-conv layers"
                        )));
                    }
                    Layer::Lstm(MGConvLSTMParams::new(
                        store,
                        &prefix,
                        &input,
                        &ls.levels,
                        ls.residual,
                        rng,
                    )?)
                }
                LayerKind::Conv => Layer::Conv(MGConvParams::new(
                    store,
                    &prefix,
                    &input,
                    &ls.levels,
                    ls.residual,
                    ls.norm,
                    Activation::Relu,
                    rng,
                )?),
            });
            prev = ls.levels.clone();
        }
        let head = match (spec.head, spec.head_level()) {
            (Some(h), Some(l)) => {
                let (w, b) = match h.kind {
                    HeadKind::Pixel => {
                        let bound = 1.0 / (l.channels as f64).sqrt();
                        // Only the centre tap starts nonzero; the rest train freely.
                        let w = Tensor::from_fn(Shape::new(3, 3, l.channels, 1), |i, j, _, _| {
                            if i == 1 && j == 1 {
                                T::from_f64_lossy(rng.gen_range(-bound..bound))
                            } else {
                                T::zero()
                            }
                        });
                        (w, Tensor::zeros(Shape::new(1, 1, 1, 1)))
                    }
                    HeadKind::Vector { outputs } => (
                        uniform_dense(l.rows * l.cols * l.channels, outputs, rng),
                        Tensor::zeros(Shape::new(1, 1, 1, outputs)),
                    ),
                };
                Some(Head {
                    level: h.level,
                    kind: h.kind,
                    weight: store.add(format!("{name}.head.weight"), w)?,
                    bias: store.add(format!("{name}.head.bias"), b)?,
                })
            }
            (Some(_), None) => {
                return Err(Error::Invalid(format!("{name}: head level out of range")))
            }
            (None, _) => None,
        };
        Ok(Stack {
            name: name.to_string(),
            spec: spec.clone(),
            layers,
            head,
        })
    }

    fn lstm_specs(&self) -> Vec<PyramidSpec> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Lstm(p) => Some(p.output.clone()),
                Layer::Conv(_) => None,
            })
            .collect()
    }

    fn init_state(&self, batch: usize) -> NetState<T> {
        NetState {
            layers: self.lstm_specs().iter().map(|s| init_state(s, batch)).collect(),
        }
    }

    fn set_norm_mode(&mut self, mode: NormMode) {
        for l in &mut self.layers {
            if let Layer::Conv(c) = l {
                c.set_norm_mode(mode);
            }
        }
    }

    fn norm_sites(&self) -> Vec<(String, &NormState<T>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            if let Layer::Conv(c) = l {
                for (j, lv) in c.levels.iter().enumerate() {
                    if let Some(n) = &lv.norm {
                        out.push((format!("{}.{k}.l{j}.bn", self.name), &n.state));
                    }
                }
            }
        }
        out
    }

    fn norm_sites_mut(&mut self) -> Vec<(String, &mut NormState<T>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            if let Layer::Conv(c) = l {
                for (j, lv) in c.levels.iter_mut().enumerate() {
                    if let Some(n) = &mut lv.norm {
                        out.push((format!("{}.{k}.l{j}.bn", self.name), &mut n.state));
                    }
                }
            }
        }
        out
    }

    fn input_var(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        let want = self.spec.input.shape(s.batch);
        if s != want {
            return Err(Error::Shape(format!(
                "{} input is {s}, expected {want}",
                self.name
            )));
        }
        Ok(s.batch)
    }

    /// Runs every layer once. `state` holds one entry per recurrent layer
    /// (in order); `extra[k]` is merged into layer `k`'s input. Returns each
    /// layer's output pyramid and the updated recurrent state.
    fn forward(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        state: &[MemoryVars],
        extra: Option<&[(Pyramid, PyramidSpec)]>,
    ) -> Result<(Vec<Pyramid>, Vec<MemoryVars>)> {
        self.input_var(g, x)?;
        let rec = self.lstm_specs().len();
        if state.len() != rec {
            return Err(Error::Shape(format!(
                "{}: state has {} layers, stack has {rec} recurrent layers",
                self.name,
                state.len()
            )));
        }
        let mut p = Pyramid::single(x);
        let mut p_spec = self.spec.input_pyramid();
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut next = Vec::with_capacity(rec);
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let input = match extra.and_then(|e| e.get(k)) {
                Some((w, ws)) => p.merged(g, &p_spec, w, ws)?,
                None => p.clone(),
            };
            let (out, out_spec) = match layer {
                Layer::Lstm(lp) => {
                    let (out, st) = mg_lstm_forward(g, store, lp, &input, &state[next.len()])?;
                    next.push(st);
                    (out, lp.output.clone())
                }
                Layer::Conv(cp) => {
                    let out = mg_conv_forward(g, store, cp, &input)?;
                    (out, cp.output.clone())
                }
            };
            outs.push(out.clone());
            p = out;
            p_spec = out_spec;
        }
        Ok((outs, next))
    }

    fn apply_head(&self, g: &mut Graph<T>, store: &ParamStore<T>, last: &Pyramid) -> Result<Var> {
        let head = self
            .head
            .ok_or_else(|| Error::Invalid(format!("{} has no output head", self.name)))?;
        let x = last.levels[head.level];
        let w = g.param(store, head.weight)?;
        let b = g.param(store, head.bias)?;
        match head.kind {
            HeadKind::Pixel => g.conv2d(x, w, Some(b)),
            HeadKind::Vector { .. } => g.dense(x, w, b),
        }
    }

    /// Shape of the head output at batch size `batch`.
    pub fn head_shape(&self, batch: usize) -> Option<Shape> {
        let l = self.spec.head_level()?;
        Some(match self.head?.kind {
            HeadKind::Pixel => Shape::new(batch, l.rows, l.cols, 1),
            HeadKind::Vector { outputs } => Shape::new(batch, 1, 1, outputs),
        })
    }
}

/// Recurrent state of a whole network: one [`MGMemoryState`] per
/// MG-conv-LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState<T> {
    pub layers: Vec<MGMemoryState<T>>,
}

impl<T: Scalar> NetState<T> {
    pub fn value_count(&self) -> usize {
        self.layers.iter().map(MGMemoryState::value_count).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(MGMemoryState::is_zero)
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, MGMemoryState::batch)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<Vec<MemoryVars>> {
        self.layers.iter().map(|s| s.bind(g)).collect()
    }

    pub fn from_vars(g: &Graph<T>, vars: &[MemoryVars]) -> Self {
        NetState {
            layers: vars.iter().map(|v| v.values(g)).collect(),
        }
    }

    fn check(&self, specs: &[PyramidSpec]) -> Result<()> {
        if self.layers.len() != specs.len() {
            return Err(Error::Shape(format!(
                "state has {} layers, network has {}",
                self.layers.len(),
                specs.len()
            )));
        }
        for (s, spec) in self.layers.iter().zip(specs) {
            s.check(spec)?;
        }
        Ok(())
    }
}

/// Head outputs of one time step plus the updated state.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// One entry per reader (writer/reader nets) or the decoder head.
    pub heads: Vec<Tensor<T>>,
    pub state: NetState<T>,
}

/// A writer holding the memory and stateless readers attached to it.
#[derive(Clone, Debug)]
pub struct WriterReaderNet<T> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub writer: Stack<T>,
    pub readers: Vec<Stack<T>>,
    pub reader_gradients: bool,
}

/// Result of one writer update recorded in a graph.
#[derive(Clone, Debug)]
pub struct WriterStep {
    /// Output pyramid of each writer layer.
    pub hidden: Vec<Pyramid>,
    pub state: Vec<MemoryVars>,
}

impl<T: Scalar> WriterReaderNet<T> {
    pub fn init_state(&self, batch: usize) -> NetState<T> {
        self.writer.init_state(batch)
    }

    pub fn state_specs(&self) -> Vec<PyramidSpec> {
        self.writer.lstm_specs()
    }

    /// Advances every writer layer once, input to deepest.
    pub fn write(
        &mut self,
        g: &mut Graph<T>,
        writer_in: Var,
        state: &[MemoryVars],
    ) -> Result<WriterStep> {
        let (hidden, state) = self.writer.forward(g, &self.store, writer_in, state, None)?;
        Ok(WriterStep { hidden, state })
    }

    /// Runs reader `r` against a writer step. Reader layer `k` sees the
    /// writer's layer-`k` output pyramid as extra input.
    pub fn read(&mut self, g: &mut Graph<T>, r: usize, input: Var, w: &WriterStep) -> Result<Var> {
        let n = self.readers.len();
        let reader = self
            .readers
            .get_mut(r)
            .ok_or_else(|| Error::Invalid(format!("reader {r} of {n}")))?;
        let mut extra = Vec::with_capacity(reader.layers.len());
        for (k, p) in w.hidden.iter().take(reader.layers.len()).enumerate() {
            let spec = match &self.writer.layers[k] {
                Layer::Lstm(lp) => lp.output.clone(),
                Layer::Conv(cp) => cp.output.clone(),
            };
            let p = if self.reader_gradients {
                p.clone()
            } else {
                Pyramid::new(p.levels.iter().map(|v| g.detach(*v)).collect::<Result<_>>()?)
            };
            extra.push((p, spec));
        }
        let (outs, _) = reader.forward(g, &self.store, input, &[], Some(&extra))?;
        reader.apply_head(g, &self.store, outs.last().expect("readers have layers"))
    }

    /// One time step on plain tensors: write, then run every reader.
    pub fn step(
        &mut self,
        writer_in: &Tensor<T>,
        reader_ins: &[Tensor<T>],
        state: &NetState<T>,
    ) -> Result<StepOutput<T>> {
        if reader_ins.len() != self.readers.len() {
            return Err(Error::Invalid(format!(
                "{} reader inputs for {} readers",
                reader_ins.len(),
                self.readers.len()
            )));
        }
        state.check(&self.state_specs())?;
        let mut g = Graph::new();
        let st = state.bind(&mut g)?;
        let x = g.constant(writer_in.clone())?;
        let w = self.write(&mut g, x, &st)?;
        let mut heads = Vec::with_capacity(reader_ins.len());
        for (r, q) in reader_ins.iter().enumerate() {
            let q = g.constant(q.clone())?;
            let y = self.read(&mut g, r, q, &w)?;
            heads.push(g.value(y).clone());
        }
        Ok(StepOutput {
            heads,
            state: NetState::from_vars(&g, &w.state),
        })
    }
}

impl<T: Scalar> WriterReaderNet<T> {
    /// Advances the writer only.
    pub fn advance(&mut self, writer_in: &Tensor<T>, state: &NetState<T>) -> Result<NetState<T>> {
        state.check(&self.state_specs())?;
        let mut g = Graph::new();
        let st = state.bind(&mut g)?;
        let x = g.constant(writer_in.clone())?;
        let w = self.write(&mut g, x, &st)?;
        Ok(NetState::from_vars(&g, &w.state))
    }

    /// Forward pass over a whole input sequence, one small graph per step.
    /// `reader_ins[t][r]` may be `None` to skip reader `r` at step `t`.
    pub fn infer(
        &mut self,
        writer_ins: &[Tensor<T>],
        reader_ins: &[Vec<Option<Tensor<T>>>],
        state: &NetState<T>,
    ) -> Result<(Vec<Vec<Option<Tensor<T>>>>, NetState<T>)> {
        if reader_ins.len() != writer_ins.len() {
            return Err(Error::Invalid("reader inputs do not cover every step".into()));
        }
        state.check(&self.state_specs())?;
        let mut st = state.clone();
        let mut outputs = Vec::with_capacity(writer_ins.len());
        for (x, qs) in writer_ins.iter().zip(reader_ins) {
            if qs.len() != self.readers.len() {
                return Err(Error::Invalid(format!(
                    "{} reader inputs for {} readers",
                    qs.len(),
                    self.readers.len()
                )));
            }
            let mut g = Graph::new();
            let vars = st.bind(&mut g)?;
            let xv = g.constant(x.clone())?;
            let w = self.write(&mut g, xv, &vars)?;
            let mut row = Vec::with_capacity(qs.len());
            for (r, q) in qs.iter().enumerate() {
                row.push(match q {
                    Some(q) => {
                        let qv = g.constant(q.clone())?;
                        let y = self.read(&mut g, r, qv, &w)?;
                        Some(g.value(y).clone())
                    }
                    None => None,
                });
            }
            outputs.push(row);
            st = NetState::from_vars(&g, &w.state);
        }
        Ok((outputs, st))
    }
}

/// Encoder and decoder meshes with memory handed over between them.
#[derive(Clone, Debug)]
pub struct EncoderDecoderNet<T> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub encoder: Stack<T>,
    pub decoder: Stack<T>,
}

/// Graph record of a full encoder-decoder pass.
#[derive(Clone, Debug)]
pub struct Seq2SeqVars {
    /// Decoder head output per decoder step.
    pub outputs: Vec<Var>,
    pub encoder_final: Vec<MemoryVars>,
    pub decoder_initial: Vec<MemoryVars>,
}

impl<T: Scalar> EncoderDecoderNet<T> {
    pub fn init_state(&self, batch: usize) -> NetState<T> {
        self.encoder.init_state(batch)
    }

    pub fn state_specs(&self) -> Vec<PyramidSpec> {
        self.encoder.lstm_specs()
    }

    /// Encodes `in_seq`, copies every encoder layer's final memory into the
    /// matching decoder layer and runs the decoder `out_len` steps on zero
    /// input.
    pub fn run_graph(&mut self, g: &mut Graph<T>, in_seq: &[Var], out_len: usize) -> Result<Seq2SeqVars> {
        let first = *in_seq
            .first()
            .ok_or_else(|| Error::Invalid("encoder input sequence is empty".into()))?;
        let batch = g.shape(first).batch;
        let mut st = self.encoder.init_state(batch).bind(g)?;
        for &x in in_seq {
            st = self.encoder.forward(g, &self.store, x, &st, None)?.1;
        }
        let encoder_final = st.clone();
        let dec_specs = self.decoder.lstm_specs();
        if dec_specs != self.encoder.lstm_specs() {
            return Err(Error::Invalid("decoder recurrent layers do not match the encoder".into()));
        }
        let zero = g.constant(Tensor::zeros(self.decoder.spec.input.shape(batch)))?;
        let mut outputs = Vec::with_capacity(out_len);
        for _ in 0..out_len {
            let (outs, next) = self.decoder.forward(g, &self.store, zero, &st, None)?;
            outputs.push(self.decoder.apply_head(g, &self.store, outs.last().expect("layers"))?);
            st = next;
        }
        Ok(Seq2SeqVars {
            outputs,
            decoder_initial: encoder_final.clone(),
            encoder_final,
        })
    }

    /// Plain-tensor form of [`run_graph`](Self::run_graph).
    pub fn run(&mut self, in_seq: &[Tensor<T>], out_len: usize) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xs = in_seq
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let r = self.run_graph(&mut g, &xs, out_len)?;
        Ok(r.outputs.iter().map(|v| g.value(*v).clone()).collect())
    }
}

/// A built network of either pattern.
#[derive(Clone, Debug)]
pub enum Network<T> {
    WriterReader(WriterReaderNet<T>),
    EncoderDecoder(EncoderDecoderNet<T>),
}

/// Validates `spec` and initializes all parameters from `rng`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Network<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    Ok(match spec {
        NetworkSpec::WriterReader {
            writer,
            readers,
            reader_gradients,
        } => {
            let w = Stack::build(&mut store, "writer", writer, None, rng)?;
            let hidden = w.lstm_specs();
            let rs = readers
                .iter()
                .enumerate()
                .map(|(r, s)| Stack::build(&mut store, &format!("reader{r}"), s, Some(&hidden), rng))
                .collect::<Result<_>>()?;
            Network::WriterReader(WriterReaderNet {
                spec: spec.clone(),
                store,
                writer: w,
                readers: rs,
                reader_gradients: *reader_gradients,
            })
        }
        NetworkSpec::EncoderDecoder { encoder, decoder } => {
            let e = Stack::build(&mut store, "encoder", encoder, None, rng)?;
            let d = Stack::build(&mut store, "decoder", decoder, None, rng)?;
            Network::EncoderDecoder(EncoderDecoderNet {
                spec: spec.clone(),
                store,
                encoder: e,
                decoder: d,
            })
        }
    })
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        match self {
            Network::WriterReader(n) => &n.spec,
            Network::EncoderDecoder(n) => &n.spec,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Network::WriterReader(n) => &n.store,
            Network::EncoderDecoder(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Network::WriterReader(n) => &mut n.store,
            Network::EncoderDecoder(n) => &mut n.store,
        }
    }

    fn stacks(&self) -> Vec<&Stack<T>> {
        match self {
            Network::WriterReader(n) => std::iter::once(&n.writer).chain(&n.readers).collect(),
            Network::EncoderDecoder(n) => vec![&n.encoder, &n.decoder],
        }
    }

    fn stacks_mut(&mut self) -> Vec<&mut Stack<T>> {
        match self {
            Network::WriterReader(n) => std::iter::once(&mut n.writer).chain(&mut n.readers).collect(),
            Network::EncoderDecoder(n) => vec![&mut n.encoder, &mut n.decoder],
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        for s in self.stacks_mut() {
            s.set_norm_mode(mode);
        }
    }

    /// Batch-norm running statistics, keyed by a stable site name.
    pub fn norm_states(&self) -> Vec<(String, &NormState<T>)> {
        self.stacks().into_iter().flat_map(|s| s.norm_sites()).collect()
    }

    pub fn norm_states_mut(&mut self) -> Vec<(String, &mut NormState<T>)> {
        self.stacks_mut().into_iter().flat_map(|s| s.norm_sites_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.store().count()
    }
}
