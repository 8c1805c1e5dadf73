//! Networks built from multigrid layers.
//!
//! Two wiring patterns are supported: a writer (stack of MG-conv-LSTM
//! layers owning all memory) with stateless MG-conv readers that view the
//! writer's hidden pyramids, and an encoder-decoder pair where the decoder's
//! memory starts as a copy of the encoder's.

mod net;
mod spec;
mod unroll;

pub use net::{
    build_network, EncoderDecoderNet, Head, Layer, NetState, Network, Seq2SeqVars, Stack,
    StepOutput, WriterReaderNet, WriterStep,
};
pub use spec::{HeadKind, HeadSpec, LayerKind, LayerSpec, NetworkSpec, StackSpec};
pub use unroll::{
    accumulate_grads, bce_loss, GradMap, LossFn, Seq2SeqEpisode, Supervision, UnrollOutput,
    WriterReaderEpisode,
};

#[cfg(test)]
mod tests;
