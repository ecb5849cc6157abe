//! Tape gradients against central finite differences of the smooth forward.

mod gradcheck;

use evsnn_core::descriptor::{Model, ModelConfig};
use evsnn_core::repr::SmlpEncoder;
use evsnn_core::rng::Stream;
use evsnn_core::snn::{Graph, Mode, ParamStore, Var};
use gradcheck::*;

#[test]
fn single_lif_neuron_over_four_steps() {
    let err = lif_neuron_error();
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn sew_block_on_four_by_four() {
    let err = sew_block_error();
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn cda_weighting_and_aggregation() {
    let err = cda_path_error();
    assert!(err <= 1e-3, "relative error {err:e}");
}

#[test]
fn timestamp_encoder() {
    let enc = SmlpEncoder::new("smlp", 8, 4, smooth_lif());
    let mut store = ParamStore::new();
    enc.register(&mut store, &mut Stream::new(7)).unwrap();
    let offsets = enc.offsets(&[0.0, 1.3, 2.9]);
    let check = Check {
        store: &store,
        leaves: vec![offsets],
        mode: Mode { train: false, smooth: true },
        build: |g: &mut Graph<'_>, v: &[Var]| enc.forward(g, v[0]).unwrap(),
    };
    let err = check.relative_error(&all_params(&store));
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn full_descriptor_network_sampled_coordinates() {
    let config = ModelConfig { scale: 0.125, lif: smooth_lif(), ..ModelConfig::default() };
    let model = Model::new(config, 11).unwrap();
    let (t, b) = (config.steps, 2);
    let mut rng = Stream::new(12);
    let mcs = random(&[t * b, 2, 8, 8], 0.0, 1.0, &mut rng);
    let tss = random(&[t * b, 2, 8, 8], 0.0, 1.0, &mut rng);
    let check = Check {
        store: &model.store,
        leaves: vec![mcs, tss],
        mode: Mode { train: true, smooth: true },
        build: |g: &mut Graph<'_>, v: &[Var]| model.forward_inputs(g, v[0], v[1]).unwrap().descriptor,
    };
    let encoder_params: Vec<Coord> = all_params(&model.store)
        .into_iter()
        .filter(|c| match c {
            Coord::Param(id, _) => !model.store.get(*id).name.starts_with("smlp."),
            Coord::Leaf(..) => true,
        })
        .collect();
    let coords = sampled(encoder_params, 60, &mut Stream::new(13));
    let err = check.relative_error(&coords);
    assert!(err <= 1e-3, "relative error {err:e}");
}
