use crate::assemblies::{HeadKind, NetworkSpec, Seq2SeqEpisode, StackSpec, Supervision, WriterReaderEpisode};
use crate::error::{Error, Result};
use crate::mglayers::LevelSpec;
use crate::tasks::{
    canvas_size, metrics_bit_error, metrics_prf, Dims, Instance, TaskId, TaskSpec,
};
use crate::tensorcore::{Shape, Tensor};

/// Probability threshold for P/R/F binarization.
pub const TAU: f32 = 0.5;

/// Writer input channels for mapping: wall, free, row and column displacement.
pub const MAPPING_INPUT_CHANNELS: usize = 4;
/// Reader input channels for mapping: wall and free one-hot of the query patch.
pub const QUERY_CHANNELS: usize = 2;

/// How a task's instances are laid out on a network's grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskLayout {
    /// The canvas sits at `(offset, offset)` inside the `grid × grid` head.
    Mapping { n: usize, m: usize, k: usize, grid: usize, offset: usize },
    Sort { length: usize, dim: usize },
    Recall { length: usize, dim: usize },
}

/// One batch ready for an unroll.
#[derive(Clone, Debug)]
pub enum Episode {
    WriterReader(WriterReaderEpisode<f32>),
    Seq2Seq(Seq2SeqEpisode<f32>),
}

fn need(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Invalid(msg()))
    }
}

fn vector_head(stack: &StackSpec, role: &str, dim: usize) -> Result<()> {
    match stack.head.map(|h| h.kind) {
        Some(HeadKind::Vector { outputs }) if outputs == dim => Ok(()),
        other => Err(Error::Invalid(format!(
            "{role} needs a vector head with {dim} outputs, has {other:?}"
        ))),
    }
}

fn input_channels(stack: &StackSpec, role: &str, want: usize) -> Result<()> {
    need(stack.input.channels == want, || {
        format!("{role} input has {} channels, the task feeds {want}", stack.input.channels)
    })
}

/// Fails unless `task` can be trained on `net` with the given truncation.
pub fn check_compat(task: &TaskSpec, net: &NetworkSpec, truncation: usize) -> Result<()> {
    let layout = TaskLayout::new(task.id(), Dims::of(task), net)?;
    if let TaskLayout::Sort { length, .. } = layout {
        need(2 * length <= truncation, || {
            format!("a sort episode unrolls {} steps, more than the truncation {truncation}", 2 * length)
        })?;
    }
    Ok(())
}

impl TaskLayout {
    pub fn new(task: TaskId, dims: Dims, net: &NetworkSpec) -> Result<Self> {
        net.validate()?;
        match (task, dims, net) {
            (TaskId::Mapping, Dims::Mapping { n, m, k }, NetworkSpec::WriterReader { writer, readers, .. }) => {
                need(writer.input == LevelSpec::new(m, m, MAPPING_INPUT_CHANNELS), || {
                    format!("writer input must be {m}x{m}x{MAPPING_INPUT_CHANNELS}")
                })?;
                need(readers.len() == 1, || "mapping uses exactly one reader".into())?;
                let r = &readers[0];
                need(r.input == LevelSpec::new(k, k, QUERY_CHANNELS), || {
                    format!("reader input must be {k}x{k}x{QUERY_CHANNELS}")
                })?;
                let head = r.head_level().expect("validated reader has a head");
                need(matches!(r.head.map(|h| h.kind), Some(HeadKind::Pixel)), || {
                    "mapping reader needs a pixel head".into()
                })?;
                let canvas = canvas_size(n);
                need(head.rows == head.cols && head.rows >= canvas, || {
                    format!("head grid {}x{} cannot hold the {canvas}x{canvas} canvas", head.rows, head.cols)
                })?;
                Ok(TaskLayout::Mapping { n, m, k, grid: head.rows, offset: (head.rows - canvas) / 2 })
            }
            (TaskId::Sort, Dims::Sequence { length, dim }, NetworkSpec::EncoderDecoder { encoder, decoder }) => {
                input_channels(encoder, "encoder", dim + 1)?;
                vector_head(decoder, "decoder", dim)?;
                Ok(TaskLayout::Sort { length, dim })
            }
            (TaskId::Recall, Dims::Sequence { length, dim }, NetworkSpec::WriterReader { writer, readers, .. }) => {
                input_channels(writer, "writer", dim + 1)?;
                need(readers.len() == 1, || "recall uses exactly one reader".into())?;
                input_channels(&readers[0], "reader", dim)?;
                vector_head(&readers[0], "reader", dim)?;
                Ok(TaskLayout::Recall { length, dim })
            }
            _ => Err(Error::Invalid(format!(
                "task {} does not fit the network pattern or dimensions",
                task.name()
            ))),
        }
    }

    pub fn task(&self) -> TaskId {
        match self {
            TaskLayout::Mapping { .. } => TaskId::Mapping,
            TaskLayout::Sort { .. } => TaskId::Sort,
            TaskLayout::Recall { .. } => TaskId::Recall,
        }
    }

    pub fn metric_names(&self) -> &'static [&'static str] {
        match self {
            TaskLayout::Mapping { .. } => &["precision", "recall", "f"],
            _ => &["bit_error"],
        }
    }

    pub fn encode(&self, net: &NetworkSpec, instances: &[Instance]) -> Result<Episode> {
        if instances.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if let Some(i) = instances.iter().position(|x| x.task_id() != self.task()) {
            return Err(Error::Invalid(format!("instance {i} belongs to another task")));
        }
        match (*self, net) {
            (TaskLayout::Mapping { .. }, NetworkSpec::WriterReader { .. }) => self.encode_mapping(instances),
            (TaskLayout::Sort { .. }, NetworkSpec::EncoderDecoder { encoder, .. }) => {
                self.encode_sort(encoder.input, instances)
            }
            (TaskLayout::Recall { .. }, NetworkSpec::WriterReader { writer, readers, .. }) => {
                self.encode_recall(writer.input, readers[0].input, instances)
            }
            _ => Err(Error::Invalid("network does not match the task layout".into())),
        }
    }

    fn encode_mapping(&self, instances: &[Instance]) -> Result<Episode> {
        let TaskLayout::Mapping { n, m, k, grid, offset } = *self else { unreachable!() };
        let eps: Vec<_> = instances
            .iter()
            .map(|i| match i {
                Instance::Mapping(e) => e,
                _ => unreachable!(),
            })
            .collect();
        let len = eps[0].len();
        for (b, e) in eps.iter().enumerate() {
            need(e.world.size() == n && e.m == m && e.k == k, || format!("episode {b} has other dimensions"))?;
            need(e.len() == len, || format!("episode {b} has {} steps, episode 0 has {len}", e.len()))?;
        }
        let steps = eps.iter().map(|e| e.steps()).collect::<Result<Vec<_>>>()?;
        let batch = eps.len();
        let canvas = canvas_size(n);
        let mut ep = WriterReaderEpisode::default();
        for t in 0..len {
            let x = Tensor::from_fn(Shape::new(batch, m, m, MAPPING_INPUT_CHANNELS), |b, i, j, c| {
                let o = &steps[b][t].observation;
                let wall = o.patch[i * m + j];
                match c {
                    0 => wall as u8 as f32,
                    1 => !wall as u8 as f32,
                    2 => o.drow,
                    _ => o.dcol,
                }
            });
            ep.writer_inputs.push(x);
            if steps.iter().all(|s| s[t].query.is_none()) {
                ep.reader_inputs.push(vec![None]);
                ep.targets.push(vec![None]);
                continue;
            }
            let q = Tensor::from_fn(Shape::new(batch, k, k, QUERY_CHANNELS), |b, i, j, c| {
                steps[b][t].query.as_ref().map_or(0.0, |q| {
                    let wall = q.patch[i * k + j];
                    (if c == 0 { wall } else { !wall }) as u8 as f32
                })
            });
            let inside = |i: usize, j: usize| {
                (offset..offset + canvas).contains(&i) && (offset..offset + canvas).contains(&j)
            };
            let sh = Shape::new(batch, grid, grid, 1);
            let target = Tensor::from_fn(sh, |b, i, j, _| match &steps[b][t].query {
                Some(q) if inside(i, j) => q.mask[(i - offset) * canvas + (j - offset)] as u8 as f32,
                _ => 0.0,
            });
            let weight = Tensor::from_fn(sh, |b, i, j, _| {
                (steps[b][t].query.is_some() && inside(i, j)) as u8 as f32
            });
            ep.reader_inputs.push(vec![Some(q)]);
            ep.targets.push(vec![Some(Supervision { target, weight: Some(weight) })]);
        }
        Ok(Episode::WriterReader(ep))
    }

    fn encode_sort(&self, input: LevelSpec, instances: &[Instance]) -> Result<Episode> {
        let TaskLayout::Sort { length, dim } = *self else { unreachable!() };
        let xs: Vec<_> = instances
            .iter()
            .map(|i| match i {
                Instance::Sort(s) => s,
                _ => unreachable!(),
            })
            .collect();
        for (b, s) in xs.iter().enumerate() {
            need(s.vectors.len() == length && s.vectors.iter().all(|v| v.len() == dim), || {
                format!("sort instance {b} has other dimensions")
            })?;
        }
        let batch = xs.len();
        let inputs = (0..length)
            .map(|t| {
                Tensor::from_fn(Shape::new(batch, input.rows, input.cols, dim + 1), |b, _, _, c| {
                    if c < dim {
                        bit(xs[b].vectors[t][c])
                    } else {
                        xs[b].priorities[t]
                    }
                })
            })
            .collect();
        let targets = (0..length)
            .map(|t| {
                Some(Supervision {
                    target: Tensor::from_fn(Shape::new(batch, 1, 1, dim), |b, _, _, c| xs[b].target[t][c] as f32),
                    weight: None,
                })
            })
            .collect();
        Ok(Episode::Seq2Seq(Seq2SeqEpisode { inputs, targets }))
    }

    fn encode_recall(&self, w_in: LevelSpec, r_in: LevelSpec, instances: &[Instance]) -> Result<Episode> {
        let TaskLayout::Recall { length, dim } = *self else { unreachable!() };
        let xs: Vec<_> = instances
            .iter()
            .map(|i| match i {
                Instance::Recall(r) => r,
                _ => unreachable!(),
            })
            .collect();
        for (b, r) in xs.iter().enumerate() {
            need(r.vectors.len() == length && r.vectors.iter().all(|v| v.len() == dim), || {
                format!("recall instance {b} has other dimensions")
            })?;
        }
        let batch = xs.len();
        let mut ep = WriterReaderEpisode::default();
        // items, then the query with the flag channel raised
        for t in 0..=length {
            ep.writer_inputs.push(Tensor::from_fn(
                Shape::new(batch, w_in.rows, w_in.cols, dim + 1),
                |b, _, _, c| match (t < length, c < dim) {
                    (true, true) => bit(xs[b].vectors[t][c]),
                    (false, true) => bit(xs[b].query_vector()[c]),
                    (last, false) => (!last) as u8 as f32,
                },
            ));
            if t < length {
                ep.reader_inputs.push(vec![None]);
                ep.targets.push(vec![None]);
            }
        }
        ep.reader_inputs.push(vec![Some(Tensor::from_fn(
            Shape::new(batch, r_in.rows, r_in.cols, dim),
            |b, _, _, c| bit(xs[b].query_vector()[c]),
        ))]);
        ep.targets.push(vec![Some(Supervision {
            target: Tensor::from_fn(Shape::new(batch, 1, 1, dim), |b, _, _, c| xs[b].target()[c] as f32),
            weight: None,
        })]);
        Ok(Episode::WriterReader(ep))
    }

    /// Per-instance metrics (in [`metric_names`](Self::metric_names) order)
    /// from head logits `outputs[t][reader]`. Mapping episodes without any
    /// query are skipped.
    pub fn score(&self, instances: &[Instance], outputs: &[Vec<Option<Tensor<f32>>>]) -> Result<Vec<Vec<f64>>> {
        let head = |t: usize| -> Result<&Tensor<f32>> {
            outputs
                .get(t)
                .and_then(|r| r.first())
                .and_then(|o| o.as_ref())
                .ok_or_else(|| Error::Invalid(format!("no head output at step {t}")))
        };
        let probs = |t: &Tensor<f32>, b: usize, i: usize, j: usize, c: usize| sigmoid(t.get(b, i, j, c));
        let mut out = Vec::with_capacity(instances.len());
        for (b, inst) in instances.iter().enumerate() {
            match (self, inst) {
                (TaskLayout::Mapping { n, offset, .. }, Instance::Mapping(e)) => {
                    let canvas = canvas_size(*n);
                    let mut acc = [0.0; 3];
                    let mut count = 0usize;
                    for (t, s) in e.steps()?.iter().enumerate() {
                        let Some(q) = &s.query else { continue };
                        let y = head(t)?;
                        let p: Vec<f32> = (0..canvas * canvas)
                            .map(|x| probs(y, b, offset + x / canvas, offset + x % canvas, 0))
                            .collect();
                        let prf = metrics_prf(&p, &q.mask, TAU);
                        acc[0] += prf.precision;
                        acc[1] += prf.recall;
                        acc[2] += prf.f;
                        count += 1;
                    }
                    if count > 0 {
                        out.push(acc.iter().map(|v| v / count as f64).collect());
                    }
                }
                (TaskLayout::Sort { length, dim }, Instance::Sort(s)) => {
                    let mut p = Vec::with_capacity(length * dim);
                    for t in 0..*length {
                        let y = head(t)?;
                        p.extend((0..*dim).map(|c| probs(y, b, 0, 0, c)));
                    }
                    out.push(vec![metrics_bit_error(&p, &s.target.concat())]);
                }
                (TaskLayout::Recall { length, dim }, Instance::Recall(r)) => {
                    let y = head(*length)?;
                    let p: Vec<f32> = (0..*dim).map(|c| probs(y, b, 0, 0, c)).collect();
                    out.push(vec![metrics_bit_error(&p, r.target())]);
                }
                _ => return Err(Error::Invalid(format!("instance {b} belongs to another task"))),
            }
        }
        Ok(out)
    }
}

fn bit(b: u8) -> f32 {
    if b != 0 {
        1.0
    } else {
        -1.0
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}
