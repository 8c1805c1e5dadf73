use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamId, Scalar, Tensor, Var};

use super::net::{EncoderDecoderNet, NetState, WriterReaderNet};

/// Supervision for one head output.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision<T> {
    pub target: Tensor<T>,
    /// Per-entry loss weight; `None` weights everything by one.
    pub weight: Option<Tensor<T>>,
}

/// Maps a head output and its supervision to a scalar loss.
pub type LossFn<T> = fn(&mut Graph<T>, Var, &Supervision<T>) -> Result<Var>;

/// Cross-entropy with logits, the loss used by every task here.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, s: &Supervision<T>) -> Result<Var> {
    g.bce_with_logits(logits, &s.target, s.weight.as_ref())
}

pub type GradMap<T> = BTreeMap<ParamId, Tensor<T>>;

/// Adds `other` into `acc` entry by entry.
pub fn accumulate_grads<T: Scalar>(acc: &mut GradMap<T>, other: GradMap<T>) {
    for (id, g) in other {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

/// Inputs and targets of a writer/reader episode, indexed `[t]` then
/// `[reader]`. A reader with no input at a step is not run at that step.
#[derive(Clone, Debug, Default)]
pub struct WriterReaderEpisode<T> {
    pub writer_inputs: Vec<Tensor<T>>,
    pub reader_inputs: Vec<Vec<Option<Tensor<T>>>>,
    pub targets: Vec<Vec<Option<Supervision<T>>>>,
}

impl<T: Scalar> WriterReaderEpisode<T> {
    pub fn len(&self) -> usize {
        self.writer_inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writer_inputs.is_empty()
    }

    fn check(&self, readers: usize) -> Result<()> {
        let t = self.len();
        if self.reader_inputs.len() != t || self.targets.len() != t {
            return Err(Error::Invalid(format!(
                "episode has {t} writer inputs, {} reader input steps, {} target steps",
                self.reader_inputs.len(),
                self.targets.len()
            )));
        }
        for (step, (ins, tgts)) in self.reader_inputs.iter().zip(&self.targets).enumerate() {
            if ins.len() != readers || tgts.len() != readers {
                return Err(Error::Invalid(format!(
                    "step {step}: {} reader inputs / {} targets for {readers} readers",
                    ins.len(),
                    tgts.len()
                )));
            }
            for (r, (i, tg)) in ins.iter().zip(tgts).enumerate() {
                if i.is_none() && tg.is_some() {
                    return Err(Error::Invalid(format!(
                        "step {step}: reader {r} is supervised but has no input"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Encoder inputs and one (optional) target per decoder step.
#[derive(Clone, Debug, Default)]
pub struct Seq2SeqEpisode<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Option<Supervision<T>>>,
}

#[derive(Clone, Debug)]
pub struct UnrollOutput<T> {
    /// Summed over supervised steps.
    pub loss: T,
    pub grads: GradMap<T>,
    /// Head outputs `[t][reader]` (`None` where a reader did not run).
    pub outputs: Vec<Vec<Option<Tensor<T>>>>,
    pub final_state: NetState<T>,
}

fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter().copied();
    match it.next() {
        None => g.constant(Tensor::scalar(T::zero())),
        Some(first) => it.try_fold(first, |acc, v| g.add(acc, v)),
    }
}

fn finish<T: Scalar>(g: Graph<T>, loss: Var) -> Result<(T, GradMap<T>)> {
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((value, g.backward(loss)?.into_param_map()))
}

impl<T: Scalar> WriterReaderNet<T> {
    /// Backpropagation through time over steps `range` of `ep`, starting
    /// from `state`. The window must not exceed `truncation` steps.
    pub fn unroll_window(
        &mut self,
        ep: &WriterReaderEpisode<T>,
        range: std::ops::Range<usize>,
        state: &NetState<T>,
        truncation: usize,
        loss_fn: LossFn<T>,
    ) -> Result<UnrollOutput<T>> {
        ep.check(self.readers.len())?;
        if range.end > ep.len() || range.is_empty() {
            return Err(Error::Invalid(format!(
                "unroll window {range:?} outside an episode of {} steps",
                ep.len()
            )));
        }
        if range.len() > truncation {
            return Err(Error::Invalid(format!(
                "unroll of {} steps exceeds the truncation length {truncation}",
                range.len()
            )));
        }
        let mut g = Graph::new();
        let mut st = state.bind(&mut g)?;
        let mut terms = Vec::new();
        let mut outputs = Vec::with_capacity(range.len());
        for t in range {
            let x = g.constant(ep.writer_inputs[t].clone())?;
            let w = self.write(&mut g, x, &st)?;
            let mut row = Vec::with_capacity(self.readers.len());
            for r in 0..self.readers.len() {
                let Some(q) = &ep.reader_inputs[t][r] else {
                    row.push(None);
                    continue;
                };
                let q = g.constant(q.clone())?;
                let y = self.read(&mut g, r, q, &w)?;
                row.push(Some(g.value(y).clone()));
                if let Some(s) = &ep.targets[t][r] {
                    terms.push(loss_fn(&mut g, y, s)?);
                }
            }
            outputs.push(row);
            st = w.state;
        }
        let final_state = NetState::from_vars(&g, &st);
        let loss = total_loss(&mut g, &terms)?;
        let (loss, grads) = finish(g, loss)?;
        Ok(UnrollOutput {
            loss,
            grads,
            outputs,
            final_state,
        })
    }

    /// Whole episode in windows of at most `truncation` steps; the state is
    /// carried across windows but gradients stop at their boundaries.
    pub fn unroll(
        &mut self,
        ep: &WriterReaderEpisode<T>,
        state: &NetState<T>,
        truncation: usize,
        loss_fn: LossFn<T>,
    ) -> Result<UnrollOutput<T>> {
        if truncation == 0 {
            return Err(Error::Invalid("truncation length must be positive".into()));
        }
        if ep.is_empty() {
            return Err(Error::Invalid("empty episode".into()));
        }
        let mut acc = UnrollOutput {
            loss: T::zero(),
            grads: GradMap::new(),
            outputs: Vec::with_capacity(ep.len()),
            final_state: state.clone(),
        };
        let mut start = 0;
        while start < ep.len() {
            let end = (start + truncation).min(ep.len());
            let w = self.unroll_window(ep, start..end, &acc.final_state, truncation, loss_fn)?;
            acc.loss = acc.loss + w.loss;
            accumulate_grads(&mut acc.grads, w.grads);
            acc.outputs.extend(w.outputs);
            acc.final_state = w.final_state;
            start = end;
        }
        Ok(acc)
    }
}

impl<T: Scalar> EncoderDecoderNet<T> {
    /// Backpropagation through the encoder and decoder together.
    pub fn unroll(
        &mut self,
        ep: &Seq2SeqEpisode<T>,
        truncation: usize,
        loss_fn: LossFn<T>,
    ) -> Result<UnrollOutput<T>> {
        let steps = ep.inputs.len() + ep.targets.len();
        if steps > truncation {
            return Err(Error::Invalid(format!(
                "unroll of {steps} steps exceeds the truncation length {truncation}"
            )));
        }
        let mut g = Graph::new();
        let xs = ep
            .inputs
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let run = self.run_graph(&mut g, &xs, ep.targets.len())?;
        let mut terms = Vec::new();
        let mut outputs = Vec::with_capacity(ep.targets.len());
        for (y, s) in run.outputs.iter().zip(&ep.targets) {
            outputs.push(vec![Some(g.value(*y).clone())]);
            if let Some(s) = s {
                terms.push(loss_fn(&mut g, *y, s)?);
            }
        }
        let final_state = NetState::from_vars(&g, &run.encoder_final);
        let loss = total_loss(&mut g, &terms)?;
        let (loss, grads) = finish(g, loss)?;
        Ok(UnrollOutput {
            loss,
            grads,
            outputs,
            final_state,
        })
    }
}

