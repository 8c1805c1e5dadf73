use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use mgmem::assemblies::Network;
use mgmem::routing::{prop1_report, reach_ppm, reachable, report_csv, Node, TopologySpec};
use mgmem::tasks::{TaskSpec, TestSet};
use mgmem::trainer::{
    apply_override, evaluate, export_memory_visual, load_checkpoint, ChannelSel, Episode,
    TaskLayout, TrainConfig, Trainer,
};
use mgmem::{Error, Result};

#[derive(Parser)]
#[command(name = "mgmem", version, about = "Multigrid memory networks: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field by dotted path, e.g. `optimizer.lr=3e-4`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint of the same network.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print every n-th metric row to stderr (0 = quiet).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Evaluate a checkpoint on a stored test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Generate a test set.
    GenData {
        /// mapping, sort or recall.
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Override a task field, e.g. `length=12` or `motion=random`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Also write a text dump next to the output.
        #[arg(long)]
        dump: bool,
    },
    /// Draw a memory layer's hidden state after running one episode.
    VisualizeMemory {
        #[arg(long)]
        ckpt: PathBuf,
        /// Test-set file holding the episode.
        #[arg(long)]
        episode: PathBuf,
        /// Index of the episode in the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Memory layer (0-based).
        #[arg(long)]
        layer: usize,
        /// Pyramid level (0 = coarsest).
        #[arg(long)]
        level: usize,
        /// Channel to draw; max-abs over channels when omitted.
        #[arg(long)]
        channel: Option<usize>,
        /// Stop after this many steps instead of the whole episode.
        #[arg(long)]
        steps: Option<usize>,
        /// PGM output; a CSV of raw values is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Receptive-field growth of the multigrid wiring against the analytic bound.
    AnalyzeRouting {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        levels: usize,
        /// Side of the coarsest grid; smallest that fits every bound when omitted.
        #[arg(long)]
        base: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the reach set of the deepest layer's finest grid (PPM).
        #[arg(long)]
        ppm: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        ppm_scale: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, overrides, resume, log_every } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let mut t = match resume {
                Some(p) => Trainer::resume(cfg, &load_checkpoint(p)?)?,
                None => Trainer::new(cfg)?,
            };
            eprintln!(
                "{} parameters, {} → {} steps, output in {}",
                t.net.param_count(),
                t.step,
                t.cfg.steps,
                t.cfg.out_dir.display()
            );
            let names = t.metric_names();
            let summary = t.run(|row| {
                if log_every > 0 && row.step % log_every == 0 {
                    let ms: Vec<String> =
                        names.iter().zip(&row.metrics).map(|(n, v)| format!("{n}={v:.4}")).collect();
                    eprintln!("step {} loss {:.4} {} ({:.0}s)", row.step, row.loss, ms.join(" "), row.seconds);
                }
            })?;
            if let Some(e) = &summary.eval {
                println!("{}", serde_json::to_string_pretty(e)?);
            }
            eprintln!("checkpoint {}", summary.checkpoint.display());
            Ok(())
        }
        Cmd::Eval { ckpt, testset, batch } => {
            let (mut net, _, _) = load_checkpoint(ckpt)?.restore()?;
            let set = TestSet::load(testset)?;
            let s = evaluate(&mut net, &set, batch)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Cmd::GenData { task, seed, count, out, overrides, dump } => {
            let mut doc = default_task(&task)?;
            for o in &overrides {
                apply_override(&mut doc, o)?;
            }
            let spec: TaskSpec = serde_json::from_value(doc)?;
            let set = TestSet::generate(&spec, seed, count)?;
            set.save(&out)?;
            if dump {
                std::fs::write(out.with_extension("txt"), set.dump_text())?;
            }
            eprintln!("{count} {task} instances → {}", out.display());
            Ok(())
        }
        Cmd::VisualizeMemory { ckpt, episode, index, layer, level, channel, steps, out } => {
            let (mut net, _, _) = load_checkpoint(ckpt)?.restore()?;
            net.set_norm_mode(mgmem::tensorcore::NormMode::Eval);
            let set = TestSet::load(episode)?;
            let inst = set
                .instances
                .get(index)
                .ok_or_else(|| Error::Invalid(format!("episode {index} outside {}", set.instances.len())))?;
            let layout = TaskLayout::new(set.task, set.dims, net.spec())?;
            let ep = layout.encode(net.spec(), std::slice::from_ref(inst))?;
            let state = memory_after(&mut net, &ep, steps)?;
            let sel = channel.map_or(ChannelSel::MaxAbs, ChannelSel::Index);
            let img = export_memory_visual(&state, layer, level, sel, 0)?;
            std::fs::write(&out, img.to_pgm())?;
            std::fs::write(out.with_extension("csv"), img.to_csv())?;
            eprintln!("{}x{} image → {}", img.rows, img.cols, out.display());
            Ok(())
        }
        Cmd::AnalyzeRouting { layers, levels, base, out, ppm, ppm_scale } => {
            let n_max = levels.min(layers);
            let base = base.unwrap_or_else(|| fitting_base(layers, n_max));
            let spec = TopologySpec::new(layers, levels, base)?;
            let rows = prop1_report(&spec, layers, n_max)?;
            std::fs::write(&out, report_csv(&rows))?;
            if let Some(p) = ppm {
                let reach = reachable(&spec, Node::new(1, 1, 1, 1))?;
                std::fs::write(p, reach_ppm(&reach, layers, levels, ppm_scale))?;
            }
            let ok = rows.iter().all(|r| r.contains_bound);
            eprintln!("{} rows, bound {} → {}", rows.len(), if ok { "holds" } else { "VIOLATED" }, out.display());
            if ok {
                Ok(())
            } else {
                Err(Error::Routing("reach set misses the bound box".into()))
            }
        }
    }
}

/// Smallest coarsest-grid side at which every bound fits its level.
fn fitting_base(layers: usize, n_max: usize) -> usize {
    (1..=n_max)
        .map(|n| {
            let need = (n..=layers).map(|m| mgmem::routing::prop1_bound(m, n)).max().unwrap_or(1);
            need.div_ceil(1 << (n - 1))
        })
        .max()
        .unwrap_or(1)
        .max(1)
}

/// Desk-scale defaults for `gen-data`.
fn default_task(id: &str) -> Result<serde_json::Value> {
    Ok(match id {
        "mapping" => json!({"id": "mapping", "n": 9, "m": 3, "k": 3, "motion": "spiral", "steps": 1000}),
        "sort" => json!({"id": "sort", "length": 8, "dim": 6}),
        "recall" => json!({"id": "recall", "length": 6, "dim": 6}),
        other => return Err(Error::Invalid(format!("unknown task {other:?} (mapping, sort, recall)"))),
    })
}

fn memory_after(
    net: &mut Network<f32>,
    ep: &Episode,
    steps: Option<usize>,
) -> Result<mgmem::assemblies::NetState<f32>> {
    match (net, ep) {
        (Network::WriterReader(n), Episode::WriterReader(ep)) => {
            let mut st = n.init_state(1);
            let t = steps.unwrap_or(ep.len()).min(ep.len());
            for x in &ep.writer_inputs[..t] {
                st = n.advance(x, &st)?;
            }
            Ok(st)
        }
        (Network::EncoderDecoder(n), Episode::Seq2Seq(ep)) => {
            let t = steps.unwrap_or(ep.inputs.len()).min(ep.inputs.len()).max(1);
            let mut g = mgmem::tensorcore::Graph::new();
            let xs = ep.inputs[..t]
                .iter()
                .map(|x| g.constant(x.clone()))
                .collect::<Result<Vec<_>>>()?;
            let run = n.run_graph(&mut g, &xs, 0)?;
            Ok(mgmem::assemblies::NetState::from_vars(&g, &run.encoder_final))
        }
        _ => Err(Error::Invalid("episode does not match the network".into())),
    }
}
