use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mglayers::{LevelSpec, PyramidSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// MG-conv-LSTM: stateful memory layer.
    Lstm,
    /// MG-conv: stateless multigrid convolution.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub levels: PyramidSpec,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub norm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// One logit per pixel of the chosen grid.
    Pixel,
    /// Flatten the chosen grid and map it to `outputs` logits.
    Vector { outputs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Level index within the stack's last layer.
    pub level: usize,
    #[serde(flatten)]
    pub kind: HeadKind,
}

/// A stack of multigrid layers fed by a single-grid input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub input: LevelSpec,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub head: Option<HeadSpec>,
}

impl StackSpec {
    pub fn input_pyramid(&self) -> PyramidSpec {
        PyramidSpec::new(vec![self.input]).expect("single level")
    }

    pub fn lstm_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Lstm).count()
    }

    /// Same stack with every spatial extent multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> StackSpec {
        StackSpec {
            input: LevelSpec::new(
                self.input.rows * factor,
                self.input.cols * factor,
                self.input.channels,
            ),
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    levels: l.levels.scaled(factor),
                    ..l.clone()
                })
                .collect(),
            head: self.head,
        }
    }

    /// Output grid of the head.
    pub fn head_level(&self) -> Option<LevelSpec> {
        let head = self.head?;
        self.layers.last()?.levels.levels().get(head.level).copied()
    }

    fn check_head(&self, role: &str) -> Result<()> {
        let head = self
            .head
            .ok_or_else(|| Error::Invalid(format!("{role} needs an output head")))?;
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Invalid(format!("{role} has no layers")))?;
        if head.level >= last.levels.len() {
            return Err(Error::Invalid(format!(
                "{role} head level {} outside its last layer ({} levels)",
                head.level,
                last.levels.len()
            )));
        }
        if let HeadKind::Vector { outputs: 0 } = head.kind {
            return Err(Error::Invalid(format!("{role} vector head has no outputs")));
        }
        Ok(())
    }
}

/// Declarative architecture description, stored as JSON in configs and
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum NetworkSpec {
    /// One MG-conv-LSTM writer holding the memory and any number of
    /// stateless MG-conv readers viewing it.
    WriterReader {
        writer: StackSpec,
        readers: Vec<StackSpec>,
        /// Let reader losses flow back into the writer.
        #[serde(default = "default_true")]
        reader_gradients: bool,
    },
    /// Encoder and decoder MG-conv-LSTM meshes; the decoder's memory starts
    /// as a copy of the encoder's final memory.
    EncoderDecoder {
        encoder: StackSpec,
        decoder: StackSpec,
    },
}

fn default_true() -> bool {
    true
}

fn check_chain(stack: &StackSpec, role: &str, extra: Option<&[PyramidSpec]>) -> Result<()> {
    if stack.layers.is_empty() {
        return Err(Error::Invalid(format!("{role} has no layers")));
    }
    if stack.input.rows == 0 || stack.input.cols == 0 || stack.input.channels == 0 {
        return Err(Error::Invalid(format!("{role} input grid is empty")));
    }
    let mut prev = stack.input_pyramid();
    for (k, layer) in stack.layers.iter().enumerate() {
        let input = match extra.and_then(|e| e.get(k)) {
            Some(w) => prev.merged(w)?,
            None => prev.clone(),
        };
        for l in layer.levels.levels() {
            if input.assembled_channels(l.rows, l.cols) == 0 {
                return Err(Error::Invalid(format!(
                    "{role} layer {k}: grid {}x{} has no neighbour in the previous pyramid",
                    l.rows, l.cols
                )));
            }
        }
        prev = layer.levels.clone();
    }
    Ok(())
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkSpec::WriterReader {
                writer, readers, ..
            } => {
                if writer.layers.iter().any(|l| l.kind != LayerKind::Lstm) {
                    return Err(Error::Invalid("writer layers must be MG-conv-LSTM".into()));
                }
                check_chain(writer, "writer", None)?;
                let hidden: Vec<PyramidSpec> =
                    writer.layers.iter().map(|l| l.levels.clone()).collect();
                for (r, reader) in readers.iter().enumerate() {
                    let role = format!("reader {r}");
                    if reader.layers.len() > writer.layers.len() {
                        return Err(Error::Invalid(format!(
                            "{role} has {} layers but the writer only {}",
                            reader.layers.len(),
                            writer.layers.len()
                        )));
                    }
                    if reader.layers.iter().any(|l| l.kind != LayerKind::Conv) {
                        return Err(Error::Invalid(format!("{role} layers must be MG-conv")));
                    }
                    check_chain(reader, &role, Some(&hidden))?;
                    reader.check_head(&role)?;
                }
                Ok(())
            }
            NetworkSpec::EncoderDecoder { encoder, decoder } => {
                if encoder.layers.iter().any(|l| l.kind != LayerKind::Lstm) {
                    return Err(Error::Invalid("encoder layers must be MG-conv-LSTM".into()));
                }
                check_chain(encoder, "encoder", None)?;
                check_chain(decoder, "decoder", None)?;
                let rec = decoder.lstm_layers();
                if decoder.layers[..rec].iter().any(|l| l.kind != LayerKind::Lstm) {
                    return Err(Error::Invalid(
                        "decoder MG-conv-LSTM layers must precede its MG-conv layers".into(),
                    ));
                }
                if rec != encoder.layers.len() {
                    return Err(Error::Invalid(format!(
                        "decoder has {rec} recurrent layers, encoder {}",
                        encoder.layers.len()
                    )));
                }
                for (k, (e, d)) in encoder.layers.iter().zip(&decoder.layers).enumerate() {
                    if e.levels != d.levels {
                        return Err(Error::Invalid(format!(
                            "decoder layer {k} state spec differs from encoder layer {k}"
                        )));
                    }
                }
                if encoder.head.is_some() {
                    return Err(Error::Invalid("encoder takes no output head".into()));
                }
                decoder.check_head("decoder")
            }
        }
    }

    /// Same architecture with every spatial extent multiplied by `factor`.
    pub fn scaled(&self, factor: usize) -> NetworkSpec {
        match self {
            NetworkSpec::WriterReader {
                writer,
                readers,
                reader_gradients,
            } => NetworkSpec::WriterReader {
                writer: writer.scaled(factor),
                readers: readers.iter().map(|r| r.scaled(factor)).collect(),
                reader_gradients: *reader_gradients,
            },
            NetworkSpec::EncoderDecoder { encoder, decoder } => NetworkSpec::EncoderDecoder {
                encoder: encoder.scaled(factor),
                decoder: decoder.scaled(factor),
            },
        }
    }
}
