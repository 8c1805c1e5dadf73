use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mglayers::{LevelSpec, PyramidSpec};
use crate::tensorcore::{Graph, ParamStore, Scalar, Shape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

fn lstm(levels: PyramidSpec) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Lstm,
        levels,
        residual: false,
        norm: false,
    }
}

fn conv(levels: PyramidSpec) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        levels,
        residual: false,
        norm: false,
    }
}

/// Writer with `depth` layers where layer k spans k+1 doubling levels.
fn growing_writer(depth: usize, ch: usize) -> StackSpec {
    StackSpec {
        input: LevelSpec::new(3, 3, 2),
        layers: (0..depth)
            .map(|k| lstm(PyramidSpec::geometric(3, 3, k + 1, ch).unwrap()))
            .collect(),
        head: None,
    }
}

fn small_wr(reader_gradients: bool) -> NetworkSpec {
    NetworkSpec::WriterReader {
        writer: growing_writer(2, 2),
        readers: vec![StackSpec {
            input: LevelSpec::new(3, 3, 1),
            layers: vec![
                conv(PyramidSpec::geometric(3, 3, 1, 2).unwrap()),
                conv(PyramidSpec::geometric(3, 3, 2, 2).unwrap()),
            ],
            head: Some(HeadSpec {
                level: 1,
                kind: HeadKind::Pixel,
            }),
        }],
        reader_gradients,
    }
}

fn small_ed() -> NetworkSpec {
    let enc = growing_writer(2, 2);
    let mut dec_layers = enc.layers.clone();
    dec_layers.push(conv(PyramidSpec::geometric(3, 3, 1, 2).unwrap()));
    NetworkSpec::EncoderDecoder {
        decoder: StackSpec {
            input: LevelSpec::new(3, 3, 2),
            layers: dec_layers,
            head: Some(HeadSpec {
                level: 0,
                kind: HeadKind::Vector { outputs: 3 },
            }),
        },
        encoder: enc,
    }
}

fn wr<T: Scalar>(spec: &NetworkSpec, seed: u64) -> WriterReaderNet<T> {
    match build_network(spec, &mut rng(seed)).unwrap() {
        Network::WriterReader(n) => n,
        _ => unreachable!(),
    }
}

fn ed<T: Scalar>(spec: &NetworkSpec, seed: u64) -> EncoderDecoderNet<T> {
    match build_network(spec, &mut rng(seed)).unwrap() {
        Network::EncoderDecoder(n) => n,
        _ => unreachable!(),
    }
}

fn zero_all<T: Scalar>(store: &mut ParamStore<T>) {
    for id in store.ids().collect::<Vec<_>>() {
        let s = store.get(id).shape();
        store.set(id, Tensor::zeros(s)).unwrap();
    }
}

/// Counts kernel, bias and peephole scalars straight from the grid sizes.
fn lstm_stack_count(spec: &StackSpec) -> usize {
    let mut prev = vec![(spec.input.rows, spec.input.channels)];
    let mut total = 0;
    for layer in &spec.layers {
        let mut cur = Vec::new();
        for l in layer.levels.levels() {
            let cin: usize = prev
                .iter()
                .filter(|(r, _)| *r == l.rows || *r * 2 == l.rows || *r == l.rows * 2)
                .map(|(_, c)| c)
                .sum();
            let c = l.channels;
            total += 3 * 3 * cin * 4 * c + 3 * 3 * c * 4 * c + 4 * c + 3 * c;
            cur.push((l.rows, c));
        }
        prev = cur;
    }
    total
}

#[test]
fn writer_parameter_count_matches_closed_form() {
    let writer = StackSpec {
        input: LevelSpec::new(3, 3, 4),
        layers: vec![
            lstm(PyramidSpec::geometric(3, 3, 1, 5).unwrap()),
            lstm(PyramidSpec::geometric(3, 3, 2, 5).unwrap()),
            lstm(PyramidSpec::geometric(3, 3, 3, 5).unwrap()),
        ],
        head: None,
    };
    let spec = NetworkSpec::WriterReader {
        writer: writer.clone(),
        readers: vec![],
        reader_gradients: true,
    };
    let net = build_network::<f32>(&spec, &mut rng(1)).unwrap();
    assert_eq!(net.param_count(), lstm_stack_count(&writer));
    let doubled = build_network::<f32>(&spec.scaled(2), &mut rng(1)).unwrap();
    assert_eq!(doubled.param_count(), net.param_count());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = small_wr(true);
    if let NetworkSpec::WriterReader { readers, .. } = &mut spec {
        readers[0]
            .layers
            .push(conv(PyramidSpec::geometric(3, 3, 2, 2).unwrap()));
        readers[0]
            .layers
            .push(conv(PyramidSpec::geometric(3, 3, 2, 2).unwrap()));
    }
    assert!(build_network::<f32>(&spec, &mut rng(1)).is_err());

    let mut spec = small_wr(true);
    if let NetworkSpec::WriterReader { readers, .. } = &mut spec {
        readers[0].head = None;
    }
    assert!(spec.validate().is_err());

    // a 12×12 level cannot be reached from a 3×3 input in one layer
    let spec = NetworkSpec::WriterReader {
        writer: StackSpec {
            input: LevelSpec::new(3, 3, 1),
            layers: vec![lstm(
                PyramidSpec::new(vec![LevelSpec::new(3, 3, 2), LevelSpec::new(6, 6, 2), LevelSpec::new(12, 12, 2)])
                    .unwrap(),
            )],
            head: None,
        },
        readers: vec![],
        reader_gradients: true,
    };
    assert!(spec.validate().is_err());

    let mut spec = small_ed();
    if let NetworkSpec::EncoderDecoder { decoder, .. } = &mut spec {
        decoder.layers[1].levels = PyramidSpec::geometric(3, 3, 2, 3).unwrap();
    }
    assert!(spec.validate().is_err());
}

#[test]
fn spec_json_round_trip() {
    for spec in [small_wr(false), small_ed()] {
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&s).unwrap(), spec);
    }
    let s = serde_json::to_value(small_wr(true)).unwrap();
    assert_eq!(s["pattern"], "writer_reader");
    assert_eq!(s["readers"][0]["head"]["kind"], "pixel");
}

#[test]
fn zero_network_reads_zero_and_keeps_zero_state() {
    let mut net = wr::<f64>(&small_wr(true), 2);
    zero_all(&mut net.store);
    let mut r = rng(3);
    let mut state = net.init_state(2);
    let count = state.value_count();
    for _ in 0..3 {
        let out = net
            .step(
                &random(Shape::new(2, 3, 3, 2), &mut r),
                &[random(Shape::new(2, 3, 3, 1), &mut r)],
                &state,
            )
            .unwrap();
        assert_eq!(out.heads[0].shape(), Shape::new(2, 6, 6, 1));
        assert!(out.heads[0].data().iter().all(|v| *v == 0.0));
        assert!(out.state.is_zero());
        assert_eq!(out.state.value_count(), count);
        state = out.state;
    }
}

#[test]
fn saturated_forget_gate_makes_repeated_steps_differ() {
    let mut net = wr::<f64>(&small_wr(true), 4);
    for id in net.store.ids().collect::<Vec<_>>() {
        if net.store.name(id).ends_with(".bias") && net.store.name(id).starts_with("writer") {
            let s = net.store.get(id).shape();
            let c = s.channels / 4;
            net.store
                .set(id, Tensor::from_fn(s, |_, _, _, k| if k / c == 1 { 10.0 } else { 0.0 }))
                .unwrap();
        }
    }
    let x = Tensor::full(Shape::new(1, 3, 3, 2), 0.8);
    let q = Tensor::full(Shape::new(1, 3, 3, 1), 0.5);
    let s0 = net.init_state(1);
    let a = net.step(&x, std::slice::from_ref(&q), &s0).unwrap();
    let b = net.step(&x, &[q], &a.state).unwrap();
    assert_ne!(a.heads[0], b.heads[0]);
    assert_ne!(a.state, b.state);
}

#[test]
fn readers_are_pure() {
    let mut net = wr::<f32>(&small_wr(true), 5);
    let mut r = rng(6);
    let x = random(Shape::new(2, 3, 3, 2), &mut r);
    let q = random(Shape::new(2, 3, 3, 1), &mut r);
    let s0 = net.init_state(2);
    let s1 = net.step(&x, std::slice::from_ref(&q), &s0).unwrap().state;

    let mut g = Graph::new();
    let st = s1.bind(&mut g).unwrap();
    let xv = g.constant(x).unwrap();
    let w = net.write(&mut g, xv, &st).unwrap();
    let qv = g.constant(q).unwrap();
    let y1 = net.read(&mut g, 0, qv, &w).unwrap();
    let y2 = net.read(&mut g, 0, qv, &w).unwrap();
    assert_eq!(g.value(y1), g.value(y2));
    assert_eq!(NetState::from_vars(&g, &st), s1);
}

#[test]
fn encoder_decoder_copies_memory_exactly() {
    let mut net = ed::<f32>(&small_ed(), 7);
    let mut r = rng(8);
    let xs: Vec<Tensor<f32>> = (0..4).map(|_| random(Shape::new(2, 3, 3, 2), &mut r)).collect();
    let mut g = Graph::new();
    let vs: Vec<_> = xs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let run = net.run_graph(&mut g, &vs, 5).unwrap();
    assert_eq!(run.outputs.len(), 5);
    let enc = NetState::from_vars(&g, &run.encoder_final);
    let dec = NetState::from_vars(&g, &run.decoder_initial);
    assert!(!enc.is_zero());
    for (a, b) in enc.layers.iter().zip(&dec.layers) {
        for (x, y) in a.h.iter().chain(&a.c).zip(b.h.iter().chain(&b.c)) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }
    assert_eq!(g.shape(run.outputs[0]), Shape::new(2, 1, 1, 3));
    assert!(net.run(&[], 3).is_err());
}

#[test]
fn decoder_output_depends_on_encoder_input() {
    let mut net = ed::<f64>(&small_ed(), 9);
    let mut r = rng(10);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random(Shape::new(1, 3, 3, 2), &mut r)).collect();
    let base = net.run(&xs, 4).unwrap();
    let mut ys = xs.clone();
    let v = ys[0].get(0, 1, 1, 0);
    ys[0].set(0, 1, 1, 0, v + 0.5);
    let moved = net.run(&ys, 4).unwrap();
    assert_ne!(base, moved);
}

fn episode(steps: usize, seed: u64) -> WriterReaderEpisode<f64> {
    let mut r = rng(seed);
    let mut ep = WriterReaderEpisode::default();
    for t in 0..steps {
        ep.writer_inputs.push(random(Shape::new(2, 3, 3, 2), &mut r));
        ep.reader_inputs.push(vec![Some(random(Shape::new(2, 3, 3, 1), &mut r))]);
        let target = Tensor::from_fn(Shape::new(2, 6, 6, 1), |_, _, _, _| {
            if r.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        ep.targets.push(vec![(t > 0).then_some(Supervision {
            target,
            weight: None,
        })]);
    }
    ep
}

#[test]
fn single_step_unroll_is_plain_loss_and_backward() {
    let mut net = wr::<f64>(&small_wr(true), 11);
    let mut ep = episode(1, 12);
    ep.targets[0][0] = Some(Supervision {
        target: Tensor::zeros(Shape::new(2, 6, 6, 1)),
        weight: None,
    });
    let s0 = net.init_state(2);
    let u = net.unroll(&ep, &s0, 8, bce_loss).unwrap();

    let mut g = Graph::new();
    let st = s0.bind(&mut g).unwrap();
    let x = g.constant(ep.writer_inputs[0].clone()).unwrap();
    let w = net.write(&mut g, x, &st).unwrap();
    let q = g.constant(ep.reader_inputs[0][0].clone().unwrap()).unwrap();
    let y = net.read(&mut g, 0, q, &w).unwrap();
    let l = g
        .bce_with_logits(y, &Tensor::zeros(Shape::new(2, 6, 6, 1)), None)
        .unwrap();
    let loss = g.value(l).item().unwrap();
    let grads = g.backward(l).unwrap().into_param_map();
    assert_eq!(u.loss, loss);
    assert_eq!(u.grads, grads);
}

#[test]
fn unroll_gradient_matches_finite_differences() {
    let mut net = wr::<f64>(&small_wr(true), 13);
    let ep = episode(3, 14);
    let s0 = net.init_state(2);
    let u = net.unroll(&ep, &s0, 8, bce_loss).unwrap();
    let h = 1e-5;
    let mut pick = rng(15);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for id in net.store.ids().collect::<Vec<_>>() {
        let n = net.store.get(id).numel();
        for _ in 0..2 {
            let k = pick.gen_range(0..n);
            let orig = net.store.get(id).data()[k];
            net.store.get_mut(id).data_mut()[k] = orig + h;
            let up = net.unroll(&ep, &s0, 8, bce_loss).unwrap().loss;
            net.store.get_mut(id).data_mut()[k] = orig - h;
            let down = net.unroll(&ep, &s0, 8, bce_loss).unwrap().loss;
            net.store.get_mut(id).data_mut()[k] = orig;
            // reader ReLUs are not differentiable at 0: skip coordinates
            // whose one-sided slopes disagree
            let (fwd, bwd) = ((up - u.loss) / h, (u.loss - down) / h);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2) {
                continue;
            }
            checked += 1;
            let num = (up - down) / (2.0 * h);
            let ana = u.grads[&id].data()[k];
            // the loss is O(10), so tiny gradients are compared absolutely
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(checked > 40, "only {checked} smooth coordinates");
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn masked_targets_give_zero_loss_and_gradients() {
    let mut net = wr::<f64>(&small_wr(true), 16);
    let mut ep = episode(3, 17);
    for row in &mut ep.targets {
        for t in row.iter_mut().flatten() {
            t.weight = Some(Tensor::zeros(t.target.shape()));
        }
    }
    let u = net.unroll(&ep, &net.init_state(2), 8, bce_loss).unwrap();
    assert_eq!(u.loss, 0.0);
    assert!(u.grads.values().all(|g| g.data().iter().all(|v| *v == 0.0)));

    for row in &mut ep.targets {
        row[0] = None;
    }
    let u = net.unroll(&ep, &net.init_state(2), 8, bce_loss).unwrap();
    assert_eq!(u.loss, 0.0);
    assert!(u.grads.values().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn truncation_splits_but_keeps_state() {
    let mut net = wr::<f64>(&small_wr(true), 18);
    let ep = episode(5, 19);
    let s0 = net.init_state(2);
    assert!(net.unroll_window(&ep, 0..5, &s0, 4, bce_loss).is_err());
    let full = net.unroll(&ep, &s0, 8, bce_loss).unwrap();
    let split = net.unroll(&ep, &s0, 2, bce_loss).unwrap();
    assert_eq!(full.final_state, split.final_state);
    assert!((full.loss - split.loss).abs() < 1e-12);
    assert_eq!(full.outputs, split.outputs);
    // gradients through the cut are lost, so totals differ
    assert_ne!(full.grads, split.grads);
}

#[test]
fn detached_readers_leave_writer_without_gradient() {
    let ep = episode(2, 20);
    for (flow, expect_nonzero) in [(false, false), (true, true)] {
        let mut net = wr::<f64>(&small_wr(flow), 21);
        let u = net.unroll(&ep, &net.init_state(2), 8, bce_loss).unwrap();
        let writer_norm: f64 = u
            .grads
            .iter()
            .filter(|(id, _)| net.store.name(**id).starts_with("writer"))
            .flat_map(|(_, g)| g.data().iter().map(|v| v * v))
            .sum();
        assert_eq!(writer_norm > 0.0, expect_nonzero, "flow={flow} norm={writer_norm}");
    }
}

#[test]
fn state_from_other_spec_is_rejected() {
    let mut net = wr::<f32>(&small_wr(true), 22);
    let other = wr::<f32>(&NetworkSpec::WriterReader {
        writer: growing_writer(1, 2),
        readers: vec![],
        reader_gradients: true,
    }, 1);
    let bad = other.init_state(1);
    let x = Tensor::zeros(Shape::new(1, 3, 3, 2));
    let q = Tensor::zeros(Shape::new(1, 3, 3, 1));
    assert!(net.step(&x, std::slice::from_ref(&q), &bad).is_err());
    assert!(net.step(&Tensor::zeros(Shape::new(1, 3, 3, 3)), &[q], &net.init_state(1)).is_err());
}
