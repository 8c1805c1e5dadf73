use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assemblies::{bce_loss, build_network, Network, UnrollOutput};
use crate::error::{Error, Result};
use crate::tasks::{gen_instance, mean_std, Dims, Instance, TestSet};
use crate::tensorcore::{NormMode, Tensor};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::TrainConfig;
use super::data::{Episode, TaskLayout};
use super::optim::{clip_global_norm, rmsprop_step, RMSPropState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const FINAL_CHECKPOINT: &str = "final.mgmc";
pub const DIVERGED_CHECKPOINT: &str = "diverged.mgmc";

/// One training step's log line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f32,
    pub metrics: Vec<f64>,
    pub seconds: f64,
}

impl MetricRow {
    pub fn csv_header(names: &[&str]) -> String {
        let mut h = vec!["step", "loss"];
        h.extend_from_slice(names);
        h.push("seconds");
        h.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.step, self.loss);
        for m in &self.metrics {
            s.push_str(&format!(",{m}"));
        }
        s.push_str(&format!(",{:.3}", self.seconds));
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub task: &'static str,
    pub count: usize,
    pub metrics: Vec<MetricSummary>,
}

impl EvalSummary {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Mean ± std of per-instance metric vectors.
pub fn summarize(layout: &TaskLayout, per_instance: &[Vec<f64>]) -> EvalSummary {
    let metrics = layout
        .metric_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let xs: Vec<f64> = per_instance.iter().map(|v| v[i]).collect();
            let (mean, std) = mean_std(&xs);
            MetricSummary { name: name.to_string(), mean, std }
        })
        .collect();
    EvalSummary { task: layout.task().name(), count: per_instance.len(), metrics }
}

fn batch_means(per_instance: &[Vec<f64>], width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| mean_std(&per_instance.iter().map(|v| v[i]).collect::<Vec<_>>()).0)
        .collect()
}

/// Head outputs `[t][reader]` for `episode`, forward only.
pub fn infer(net: &mut Network<f32>, episode: &Episode) -> Result<Vec<Vec<Option<Tensor<f32>>>>> {
    match (net, episode) {
        (Network::WriterReader(n), Episode::WriterReader(ep)) => {
            let batch = ep.writer_inputs.first().map_or(0, |t| t.shape().batch);
            let state = n.init_state(batch);
            Ok(n.infer(&ep.writer_inputs, &ep.reader_inputs, &state)?.0)
        }
        (Network::EncoderDecoder(n), Episode::Seq2Seq(ep)) => Ok(n
            .run(&ep.inputs, ep.targets.len())?
            .into_iter()
            .map(|y| vec![Some(y)])
            .collect()),
        _ => Err(Error::Invalid("episode does not match the network pattern".into())),
    }
}

fn unroll(net: &mut Network<f32>, episode: &Episode, truncation: usize) -> Result<UnrollOutput<f32>> {
    match (net, episode) {
        (Network::WriterReader(n), Episode::WriterReader(ep)) => {
            let batch = ep.writer_inputs.first().map_or(0, |t| t.shape().batch);
            let state = n.init_state(batch);
            n.unroll(ep, &state, truncation, bce_loss)
        }
        (Network::EncoderDecoder(n), Episode::Seq2Seq(ep)) => n.unroll(ep, truncation, bce_loss),
        _ => Err(Error::Invalid("episode does not match the network pattern".into())),
    }
}

/// Inference-only evaluation on a stored test set. Batch-norm uses its
/// running statistics; neither parameters nor statistics change.
pub fn evaluate(net: &mut Network<f32>, set: &TestSet, batch: usize) -> Result<EvalSummary> {
    let layout = TaskLayout::new(set.task, set.dims, net.spec())?;
    if set.instances.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    net.set_norm_mode(NormMode::Eval);
    let result = (|| {
        let mut per = Vec::with_capacity(set.instances.len());
        for chunk in set.instances.chunks(batch.max(1)) {
            let ep = layout.encode(net.spec(), chunk)?;
            let outputs = infer(net, &ep)?;
            per.extend(layout.score(chunk, &outputs)?);
        }
        Ok(summarize(&layout, &per))
    })();
    net.set_norm_mode(NormMode::Training);
    result
}

/// Optimizer, network and data stream of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network<f32>,
    pub opt: RMSPropState<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub layout: TaskLayout,
}

impl Trainer {
    /// Fresh run: the seed drives initialization and then the data stream.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = build_network(&cfg.network, &mut rng)?;
        let opt = RMSPropState::new(net.store(), cfg.optimizer)?;
        let layout = TaskLayout::new(cfg.task.id(), Dims::of(&cfg.task), &cfg.network)?;
        Ok(Trainer { cfg, net, opt, rng, step: 0, layout })
    }

    /// Continues from a checkpoint of the same network.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.spec != cfg.network {
            return Err(Error::Invalid("checkpoint network differs from the config".into()));
        }
        let (net, mut opt, rng) = ckpt.restore()?;
        opt.config = cfg.optimizer;
        let layout = TaskLayout::new(cfg.task.id(), Dims::of(&cfg.task), &cfg.network)?;
        Ok(Trainer { cfg, net, opt, rng, step: ckpt.step, layout })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, &self.opt, &self.rng, self.step)
    }

    pub fn metric_names(&self) -> &'static [&'static str] {
        self.layout.metric_names()
    }

    /// Draws a batch, unrolls, clips and applies one RMSProp update.
    /// Returns the loss and the batch-mean task metrics.
    pub fn train_step(&mut self) -> Result<(f32, Vec<f64>)> {
        let instances = (0..self.cfg.batch_size)
            .map(|_| gen_instance(&self.cfg.task, &mut self.rng))
            .collect::<Result<Vec<Instance>>>()?;
        let ep = self.layout.encode(&self.cfg.network, &instances)?;
        let mut out = unroll(&mut self.net, &ep, self.cfg.truncation)?;
        let per = self.layout.score(&instances, &out.outputs)?;
        clip_global_norm(&mut out.grads, self.cfg.clip_norm);
        self.opt.config.lr = self.cfg.lr_at(self.step);
        rmsprop_step(self.net.store_mut(), &out.grads, &mut self.opt)?;
        self.step += 1;
        Ok((out.loss, batch_means(&per, self.layout.metric_names().len())))
    }

    fn held_out(&self) -> Result<TestSet> {
        TestSet::generate(&self.cfg.task, self.cfg.eval_seed, self.cfg.eval_count)
    }

    /// Runs to `cfg.steps`, writing metrics, evaluations and checkpoints
    /// under `cfg.out_dir`. `on_row` sees every metric row.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricRow)) -> Result<RunSummary> {
        let dir = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.json"), self.cfg.to_json())?;
        let names = self.metric_names();
        let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
        writeln!(metrics, "{}", MetricRow::csv_header(names))?;
        let mut evals = BufWriter::new(File::create(dir.join(EVAL_FILE))?);
        let eval_cols: Vec<String> = names.iter().flat_map(|n| [format!("{n}_mean"), format!("{n}_std")]).collect();
        writeln!(evals, "step,{}", eval_cols.join(","))?;
        let test = if self.cfg.eval_count > 0 { Some(self.held_out()?) } else { None };
        let start = Instant::now();
        let mut last_eval = None;
        while self.step < self.cfg.steps {
            let before = self.checkpoint();
            let (loss, m) = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    save_checkpoint(dir.join(DIVERGED_CHECKPOINT), &before)?;
                    metrics.flush()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let row = MetricRow { step: self.step, loss, metrics: m, seconds: start.elapsed().as_secs_f64() };
            writeln!(metrics, "{}", row.to_csv())?;
            on_row(&row);
            let every = |k: u64| k > 0 && self.step.is_multiple_of(k);
            if every(self.cfg.eval_every) {
                if let Some(t) = &test {
                    let s = evaluate(&mut self.net, t, self.cfg.batch_size)?;
                    write_eval(&mut evals, self.step, &s)?;
                    metrics.flush()?;
                    last_eval = Some(s);
                }
            }
            if every(self.cfg.checkpoint_every) {
                save_checkpoint(dir.join(format!("step-{:08}.mgmc", self.step)), &self.checkpoint())?;
            }
        }
        metrics.flush()?;
        if let Some(t) = &test {
            if !last_eval.is_some() && every_hit(self.step, self.cfg.eval_every) {
                let s = evaluate(&mut self.net, t, self.cfg.batch_size)?;
                write_eval(&mut evals, self.step, &s)?;
                last_eval = Some(s);
            }
        }
        evals.flush()?;
        let final_path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&final_path, &self.checkpoint())?;
        Ok(RunSummary { steps: self.step, checkpoint: final_path, eval: last_eval })
    }
}

fn every_hit(step: u64, k: u64) -> bool {
    k > 0 && step.is_multiple_of(k)
}

fn write_eval(w: &mut impl Write, step: u64, s: &EvalSummary) -> Result<()> {
    let cols: Vec<String> = s.metrics.iter().map(|m| format!("{},{}", m.mean, m.std)).collect();
    writeln!(w, "{step},{}", cols.join(","))?;
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub eval: Option<EvalSummary>,
}

/// Fresh run of `cfg` to completion.
pub fn train(cfg: TrainConfig) -> Result<RunSummary> {
    Trainer::new(cfg)?.run(|_| {})
}

