use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::assemblies::Network;
use crate::error::Error;
use crate::tasks::{gen_instance, Dims, Instance, TaskId, TestSet};
use crate::tensorcore::{Shape, Tensor};

const SORT: &str = r#"{
  "task": {"id": "sort", "length": 3, "dim": 2},
  "network": {"pattern": "encoder_decoder",
    "encoder": {"input": {"rows": 2, "cols": 2, "channels": 3},
                "layers": [{"kind": "lstm", "levels": [{"rows": 2, "cols": 2, "channels": 3}, {"rows": 4, "cols": 4, "channels": 2}]}]},
    "decoder": {"input": {"rows": 2, "cols": 2, "channels": 1},
                "layers": [{"kind": "lstm", "levels": [{"rows": 2, "cols": 2, "channels": 3}, {"rows": 4, "cols": 4, "channels": 2}]},
                           {"kind": "conv", "levels": [{"rows": 2, "cols": 2, "channels": 2}], "norm": true}],
                "head": {"level": 0, "kind": "vector", "outputs": 2}}},
  "seed": 11, "batch_size": 3, "steps": 6, "eval_count": 4, "out_dir": "unused"
}"#;

const RECALL: &str = r#"{
  "task": {"id": "recall", "length": 3, "dim": 2},
  "network": {"pattern": "writer_reader",
    "writer": {"input": {"rows": 2, "cols": 2, "channels": 3},
               "layers": [{"kind": "lstm", "levels": [{"rows": 2, "cols": 2, "channels": 4}]}]},
    "readers": [{"input": {"rows": 2, "cols": 2, "channels": 2},
                 "layers": [{"kind": "conv", "levels": [{"rows": 2, "cols": 2, "channels": 3}]}],
                 "head": {"level": 0, "kind": "vector", "outputs": 2}}]},
  "seed": 3, "batch_size": 4, "steps": 4, "eval_count": 0, "out_dir": "unused"
}"#;

const MAPPING: &str = r#"{
  "task": {"id": "mapping", "n": 5, "m": 3, "k": 3, "motion": "spiral", "steps": 12},
  "network": {"pattern": "writer_reader",
    "writer": {"input": {"rows": 3, "cols": 3, "channels": 4},
               "layers": [{"kind": "lstm", "levels": [{"rows": 3, "cols": 3, "channels": 3}, {"rows": 6, "cols": 6, "channels": 3}]},
                          {"kind": "lstm", "levels": [{"rows": 3, "cols": 3, "channels": 3}, {"rows": 6, "cols": 6, "channels": 3}, {"rows": 12, "cols": 12, "channels": 2}]}]},
    "readers": [{"input": {"rows": 3, "cols": 3, "channels": 2},
                 "layers": [{"kind": "conv", "levels": [{"rows": 3, "cols": 3, "channels": 3}, {"rows": 6, "cols": 6, "channels": 3}]},
                            {"kind": "conv", "levels": [{"rows": 6, "cols": 6, "channels": 3}, {"rows": 12, "cols": 12, "channels": 2}]}],
                 "head": {"level": 1, "kind": "pixel"}}]},
  "seed": 5, "batch_size": 2, "steps": 2, "eval_count": 2, "truncation": 5, "out_dir": "unused"
}"#;

fn cfg(text: &str, dir: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::from_json_with_env(text, &[], None).unwrap();
    c.out_dir = dir.to_path_buf();
    c
}

fn outputs_of(net: &mut Network<f32>, layout: &TaskLayout, instances: &[Instance]) -> Vec<Vec<Option<Tensor<f32>>>> {
    let ep = layout.encode(net.spec(), instances).unwrap();
    infer(net, &ep).unwrap()
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(SORT, dir.path());
    c.steps = 0;
    let fresh = Trainer::new(c.clone()).unwrap().checkpoint();
    let run = train(c).unwrap();
    assert_eq!(run.steps, 0);
    let saved = load_checkpoint(run.checkpoint).unwrap();
    assert_eq!(saved, fresh);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, "step,loss,bit_error,seconds\n");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg(SORT, dir.path())).unwrap();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    let path = dir.path().join("c.mgmc");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, t.checkpoint());
    assert_eq!(back.encode(), t.checkpoint().encode());
    let (mut net, opt, rng) = back.restore().unwrap();
    assert_eq!(opt, t.opt);
    assert_eq!(RngState::capture(&rng), RngState::capture(&t.rng));
    assert!(net.norm_states().iter().zip(t.net.norm_states()).all(|(a, b)| a.1 == b.1));
    let mut g = ChaCha8Rng::seed_from_u64(40);
    let task = t.cfg.task.clone();
    let xs: Vec<Instance> = (0..5).map(|_| gen_instance(&task, &mut g).unwrap()).collect();
    for mode in [crate::tensorcore::NormMode::Training, crate::tensorcore::NormMode::Eval] {
        net.set_norm_mode(mode);
        t.net.set_norm_mode(mode);
        let a = outputs_of(&mut net, &t.layout, &xs);
        let b = outputs_of(&mut t.net, &t.layout, &xs);
        assert_eq!(a, b);
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(RECALL, dir.path());
    let mut whole = Trainer::new(c.clone()).unwrap();
    for _ in 0..4 {
        whole.train_step().unwrap();
    }
    let mut first = Trainer::new(c.clone()).unwrap();
    first.train_step().unwrap();
    first.train_step().unwrap();
    let bytes = first.checkpoint().encode();
    let mut second = Trainer::resume(c, &Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(second.step, 2);
    second.train_step().unwrap();
    second.train_step().unwrap();
    assert_eq!(second.checkpoint(), whole.checkpoint());
}

#[test]
fn truncated_and_corrupt_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(cfg(RECALL, dir.path())).unwrap();
    let bytes = t.checkpoint().encode();
    for cut in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
        match Checkpoint::decode(&bytes[..cut]) {
            Err(Error::Corrupt { .. }) => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::decode(&extra), Err(Error::Corrupt { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&magic), Err(Error::Corrupt { .. })));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match Checkpoint::decode(&version) {
        Err(e @ Error::Version { .. }) => assert!(e.to_string().contains("version 2")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shape_mismatch_against_spec_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(cfg(RECALL, dir.path())).unwrap();
    let mut c = t.checkpoint();
    c.tensors[0].value = Tensor::zeros(Shape::new(1, 1, 1, 1));
    assert!(matches!(c.restore(), Err(Error::Shape(_))));
    let mut c = t.checkpoint();
    c.tensors.pop();
    assert!(c.restore().is_err());
    let mut c = t.checkpoint();
    c.tensors[1].name = c.tensors[0].name.clone();
    assert!(c.restore().is_err());
    let mut c = t.checkpoint();
    c.accumulators[0].value.data_mut()[0] = -1.0;
    assert!(c.restore().is_err());
}

#[test]
fn metrics_are_deterministic_and_append_only() {
    let rows = |d: &std::path::Path| -> Vec<String> {
        let mut c = cfg(SORT, d);
        c.eval_every = 3;
        train(c).unwrap();
        std::fs::read_to_string(d.join(METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = rows(a.path());
    assert_eq!(ra, rows(b.path()));
    assert_eq!(ra.len(), 7);
    let steps: Vec<u64> = ra[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    let eval = std::fs::read_to_string(a.path().join(EVAL_FILE)).unwrap();
    assert_eq!(eval.lines().count(), 3, "{eval}");
    assert_eq!(
        std::fs::read(a.path().join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(b.path().join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn non_finite_loss_leaves_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg(RECALL, dir.path())).unwrap();
    let id = t.net.store().ids().last().unwrap();
    t.net.store_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let err = t.run(|_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let diag = load_checkpoint(dir.path().join(DIVERGED_CHECKPOINT)).unwrap();
    assert_eq!(diag.step, 0);
}

#[test]
fn evaluation_is_idempotent_and_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg(SORT, dir.path())).unwrap();
    t.train_step().unwrap();
    let set = TestSet::generate(&t.cfg.task, 99, 7).unwrap();
    let before = t.checkpoint();
    let a = evaluate(&mut t.net, &set, 3).unwrap();
    let b = evaluate(&mut t.net, &set, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count, 7);
    assert_eq!(t.checkpoint(), before);
    let other = TestSet::generate(&crate::tasks::TaskSpec::Sort { length: 3, dim: 3 }, 1, 2).unwrap();
    assert!(evaluate(&mut t.net, &other, 2).is_err());
}

#[test]
fn perfect_predictor_scores_one_and_chance_scores_half() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(cfg(MAPPING, dir.path())).unwrap();
    let set = TestSet::generate(&t.cfg.task, 4, 3).unwrap();
    let Episode::WriterReader(ep) = t.layout.encode(t.net.spec(), &set.instances).unwrap() else { panic!() };
    // logits that reproduce the targets exactly
    let perfect: Vec<Vec<Option<Tensor<f32>>>> = ep
        .targets
        .iter()
        .map(|r| r.iter().map(|s| s.as_ref().map(|s| s.target.map(|y| if y > 0.5 { 20.0 } else { -20.0 }))).collect())
        .collect();
    let per = t.layout.score(&set.instances, &perfect).unwrap();
    let s = summarize(&t.layout, &per);
    assert_eq!(s.get("f").unwrap().mean, 1.0);
    assert_eq!(s.get("f").unwrap().std, 0.0);

    let rc = cfg(RECALL, dir.path());
    let layout = TaskLayout::new(TaskId::Recall, Dims::of(&rc.task), &rc.network).unwrap();
    let set = TestSet::generate(&rc.task, 8, 500).unwrap();
    let mut half = vec![vec![None]; 3];
    half.push(vec![Some(Tensor::zeros(Shape::new(500, 1, 1, 2)))]);
    let s = summarize(&layout, &layout.score(&set.instances, &half).unwrap());
    let e = s.get("bit_error").unwrap().mean;
    assert!((e - 0.5).abs() < 0.05, "{e}");
}

#[test]
fn mapping_layout_centres_canvas_in_head() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(MAPPING, dir.path());
    let layout = TaskLayout::new(TaskId::Mapping, Dims::of(&c.task), &c.network).unwrap();
    assert_eq!(layout, TaskLayout::Mapping { n: 5, m: 3, k: 3, grid: 12, offset: 1 });
    let set = TestSet::generate(&c.task, 2, 2).unwrap();
    let Episode::WriterReader(ep) = layout.encode(&c.network, &set.instances).unwrap() else { panic!() };
    let Instance::Mapping(e0) = &set.instances[0] else { panic!() };
    let steps = e0.steps().unwrap();
    assert_eq!(ep.len(), e0.len());
    for (t, s) in steps.iter().enumerate() {
        let x = &ep.writer_inputs[t];
        for i in 0..3 {
            for j in 0..3 {
                let wall = s.observation.patch[i * 3 + j];
                assert_eq!(x.get(0, i, j, 0), wall as u8 as f32);
                assert_eq!(x.get(0, i, j, 1), !wall as u8 as f32);
                assert_eq!(x.get(0, i, j, 2), s.observation.drow);
                assert_eq!(x.get(0, i, j, 3), s.observation.dcol);
            }
        }
        match (&s.query, &ep.targets[t][0]) {
            (Some(q), Some(sup)) => {
                let w = sup.weight.as_ref().unwrap();
                for i in 0..12 {
                    for j in 0..12 {
                        let inside = (1..10).contains(&i) && (1..10).contains(&j);
                        assert_eq!(w.get(0, i, j, 0), inside as u8 as f32);
                        let y = if inside { q.mask[(i - 1) * 9 + j - 1] as u8 as f32 } else { 0.0 };
                        assert_eq!(sup.target.get(0, i, j, 0), y);
                    }
                }
            }
            (None, _) => {}
            (Some(_), None) => panic!("step {t} query lost"),
        }
    }
    // mapping trains end to end across truncation windows
    let mut t = Trainer::new(c).unwrap();
    let (loss, m) = t.train_step().unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(m.len(), 3);
}

#[test]
fn incompatible_task_and_network_rejected() {
    let r = TrainConfig::from_json_with_env(RECALL, &["task.dim=3".into()], None);
    assert!(r.is_err());
    let r = TrainConfig::from_json_with_env(MAPPING, &["task.n=13".into()], None);
    assert!(r.is_err(), "canvas 25 does not fit a 12x12 head");
    let r = TrainConfig::from_json_with_env(
        SORT,
        &[r#"task={"id":"recall","length":3,"dim":2}"#.into()],
        None,
    );
    assert!(r.is_err());
}
