//! Pyramids and the two multigrid layer types.
//!
//! A layer maps an input pyramid to an output pyramid. For every output
//! grid it concatenates the upsampled coarser neighbour, the same-size grid
//! and the max-pooled finer neighbour of the input (whichever exist), then
//! applies either a plain convolution ([`mg_conv_forward`]) or a
//! convolutional LSTM cell with peephole connections ([`mg_lstm_forward`]).

mod conv;
mod init;
mod lstm;
mod pyramid;
mod state;

pub use conv::{mg_conv_forward, Activation, ConvLevelParams, LevelNorm, MGConvParams};
pub use init::{uniform_dense, uniform_kernel};
pub use lstm::{mg_lstm_forward, LstmLevelParams, MGConvLSTMParams, FORGET_BIAS_INIT, GATES};
pub use pyramid::{assemble_for, assemble_input, LevelSpec, Pyramid, PyramidSpec};
pub use state::{init_state, MGMemoryState, MemoryVars};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensorcore::{Graph, ParamStore, Shape, Tensor};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn bind(g: &mut Graph<f64>, ts: Vec<Tensor<f64>>) -> Pyramid {
        Pyramid::new(ts.into_iter().map(|t| g.constant(t).unwrap()).collect())
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape();
            store.set(id, Tensor::zeros(s)).unwrap();
        }
    }

    #[test]
    fn pyramid_spec_requires_doubling() {
        assert!(PyramidSpec::new(vec![]).is_err());
        assert!(PyramidSpec::new(vec![LevelSpec::new(3, 3, 1), LevelSpec::new(5, 5, 1)]).is_err());
        let p = PyramidSpec::geometric(3, 3, 3, 4).unwrap();
        assert_eq!(p.finest(), &LevelSpec::new(12, 12, 4));
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PyramidSpec>(&json).unwrap(), p);
        assert!(serde_json::from_str::<PyramidSpec>(
            r#"[{"rows":3,"cols":3,"channels":1},{"rows":7,"cols":6,"channels":1}]"#
        )
        .is_err());
    }

    #[test]
    fn assemble_single_level_is_identity() {
        let mut g = Graph::<f64>::new();
        let spec = PyramidSpec::new(vec![LevelSpec::new(3, 3, 2)]).unwrap();
        let p = bind(&mut g, vec![random(Shape::new(1, 3, 3, 2), &mut rng(1))]);
        let a = assemble_input(&mut g, &p, &spec, 0).unwrap();
        assert_eq!(a, p.levels[0]);
    }

    #[test]
    fn assemble_middle_level_concatenates_all_neighbours() {
        let spec = PyramidSpec::new(vec![
            LevelSpec::new(2, 2, 1),
            LevelSpec::new(4, 4, 2),
            LevelSpec::new(8, 8, 3),
        ])
        .unwrap();
        let (a, b) = (0.75, -0.5);
        let mut g = Graph::<f64>::new();
        let mid = random(Shape::new(2, 4, 4, 2), &mut rng(2));
        let p = bind(
            &mut g,
            vec![
                Tensor::full(Shape::new(2, 2, 2, 1), a),
                mid.clone(),
                Tensor::full(Shape::new(2, 8, 8, 3), b),
            ],
        );
        let v = assemble_input(&mut g, &p, &spec, 1).unwrap();
        let t = g.value(v).clone();
        assert_eq!(t.shape().channels, 1 + 2 + 3);
        assert_eq!(spec.assembled_channels(4, 4), 6);
        assert_eq!(t.channel_slice(0, 1).unwrap(), Tensor::full(Shape::new(2, 4, 4, 1), a));
        assert_eq!(t.channel_slice(1, 2).unwrap(), mid);
        assert_eq!(t.channel_slice(3, 3).unwrap(), Tensor::full(Shape::new(2, 4, 4, 3), b));

        // dropping the finer neighbour removes exactly its block
        let two = PyramidSpec::new(spec.levels()[..2].to_vec()).unwrap();
        let p2 = Pyramid::new(p.levels[..2].to_vec());
        let v2 = assemble_input(&mut g, &p2, &two, 1).unwrap();
        assert_eq!(g.value(v2), &t.channel_slice(0, 3).unwrap());
        assert_eq!(two.assembled_channels(4, 4), 3);
    }

    #[test]
    fn mg_conv_identity_and_zero() {
        let spec = PyramidSpec::geometric(2, 2, 2, 2).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut layer = MGConvParams::new(
            &mut store,
            "r",
            &spec,
            &spec,
            false,
            false,
            Activation::Identity,
            &mut rng(3),
        )
        .unwrap();
        // level 0 assembles [same, ↓finer]; level 1 assembles [↑coarser, same]
        let same_offset = [0usize, 2];
        for (j, lp) in layer.levels.clone().iter().enumerate() {
            let s = store.get(lp.kernel).shape();
            let off = same_offset[j];
            store
                .set(
                    lp.kernel,
                    Tensor::from_fn(s, |di, dj, ci, co| {
                        if di == 1 && dj == 1 && ci == off + co {
                            1.0
                        } else {
                            0.0
                        }
                    }),
                )
                .unwrap();
        }
        let mut g = Graph::<f64>::new();
        let ins = vec![
            random(Shape::new(1, 2, 2, 2), &mut rng(4)),
            random(Shape::new(1, 4, 4, 2), &mut rng(5)),
        ];
        let p = bind(&mut g, ins.clone());
        let out = mg_conv_forward(&mut g, &store, &mut layer, &p).unwrap();
        assert_eq!(out.values(&g), ins);

        zero_all(&mut store);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, ins);
        let out = mg_conv_forward(&mut g, &store, &mut layer, &p).unwrap();
        for t in out.values(&g) {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mg_lstm_zero_params_give_zero_state() {
        let spec = PyramidSpec::geometric(3, 3, 2, 2).unwrap();
        let input = PyramidSpec::new(vec![LevelSpec::new(3, 3, 4)]).unwrap();
        let mut store = ParamStore::<f64>::new();
        let layer = MGConvLSTMParams::new(&mut store, "w", &input, &spec, false, &mut rng(6)).unwrap();
        zero_all(&mut store);
        let mut g = Graph::<f64>::new();
        let mut st = init_state::<f64>(&spec, 2).bind(&mut g).unwrap();
        for t in 0..5 {
            let p = bind(&mut g, vec![random(Shape::new(2, 3, 3, 4), &mut rng(10 + t))]);
            let (out, next) = mg_lstm_forward(&mut g, &store, &layer, &p, &st).unwrap();
            st = next;
            assert!(out.values(&g).iter().all(|v| v.data().iter().all(|x| *x == 0.0)));
        }
        assert!(st.values(&g).is_zero());
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let spec = PyramidSpec::new(vec![LevelSpec::new(3, 3, 2)]).unwrap();
        let mut store = ParamStore::<f64>::new();
        let layer = MGConvLSTMParams::new(&mut store, "w", &spec, &spec, false, &mut rng(7)).unwrap();
        zero_all(&mut store);
        let bias = layer.levels[0].bias;
        store
            .set(
                bias,
                Tensor::from_fn(Shape::new(1, 1, 1, 8), |_, _, _, k| if k / 2 == 1 { 10.0 } else { 0.0 }),
            )
            .unwrap();
        let mut g = Graph::<f64>::new();
        let c0 = random(Shape::new(1, 3, 3, 2), &mut rng(8)).map(|v| 2.0 * v + 0.1f64.copysign(v));
        let st = MGMemoryState {
            h: vec![Tensor::zeros(Shape::new(1, 3, 3, 2))],
            c: vec![c0.clone()],
        }
        .bind(&mut g)
        .unwrap();
        let p = bind(&mut g, vec![random(Shape::new(1, 3, 3, 2), &mut rng(9))]);
        let (_, next) = mg_lstm_forward(&mut g, &store, &layer, &p, &st).unwrap();
        let c1 = g.value(next.c[0]);
        for (a, b) in c1.data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn init_state_examples() {
        let spec = PyramidSpec::new(vec![LevelSpec::new(3, 3, 2)]).unwrap();
        let s = init_state::<f32>(&spec, 1);
        assert_eq!(s.h, vec![Tensor::zeros(Shape::new(1, 3, 3, 2))]);
        assert_eq!(s.c, s.h);
        let big = PyramidSpec::geometric(3, 3, 3, 5).unwrap();
        let s = init_state::<f32>(&big, 4);
        assert_eq!(s.value_count(), big.state_values(4));
        assert_eq!(s.value_count(), 2 * 4 * 5 * (9 + 36 + 144));
        assert!(s.check(&big).is_ok());
        assert!(s.check(&spec).is_err());
    }

    #[test]
    fn lstm_parameter_count_ignores_grid_size() {
        let input = PyramidSpec::new(vec![LevelSpec::new(3, 3, 4)]).unwrap();
        let out = PyramidSpec::new(vec![LevelSpec::new(3, 3, 6), LevelSpec::new(6, 6, 3)]).unwrap();
        let count = |i: &PyramidSpec, o: &PyramidSpec| {
            let mut store = ParamStore::<f32>::new();
            MGConvLSTMParams::new(&mut store, "w", i, o, false, &mut rng(1)).unwrap();
            store.count()
        };
        let base = count(&input, &out);
        assert_eq!(base, MGConvLSTMParams::closed_form_count(&input, &out));
        assert_eq!(count(&input.scaled(2), &out.scaled(2)), base);
        assert_eq!(count(&input.scaled(4), &out.scaled(4)), base);
    }

    #[test]
    fn unreachable_output_grid_is_rejected() {
        let input = PyramidSpec::new(vec![LevelSpec::new(3, 3, 4)]).unwrap();
        let out = PyramidSpec::geometric(3, 3, 3, 2).unwrap();
        let mut store = ParamStore::<f32>::new();
        assert!(MGConvLSTMParams::new(&mut store, "w", &input, &out, false, &mut rng(1)).is_err());
    }
}
