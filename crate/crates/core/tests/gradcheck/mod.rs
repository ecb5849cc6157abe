//! Tape gradients against central finite differences of the smooth forward.
//! Shared by the gradient tests and the acceptance suite.

#![allow(dead_code)]

use evsnn_core::descriptor::{aggregate, CdaHead};
use evsnn_core::rng::Stream;
use evsnn_core::snn::{Graph, LifParams, Mode, ParamId, ParamStore, SewBlock, Var};
use evsnn_core::Tensor;

const EPS: f64 = 1e-4;

pub fn smooth_lif() -> LifParams {
    LifParams { detach_reset: false, ..LifParams::default() }
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(lo, hi)).collect()).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum Coord {
    Param(ParamId, usize),
    Leaf(usize, usize),
}

/// `f = <r, build(leaves)>` for a fixed random `r`, differentiated both ways.
pub struct Check<'a, F> {
    pub store: &'a ParamStore,
    pub leaves: Vec<Tensor>,
    pub mode: Mode,
    pub build: F,
}

impl<F: Fn(&mut Graph<'_>, &[Var]) -> Var> Check<'_, F> {
    fn value(&self, store: &ParamStore, leaves: &[Tensor], r: &Tensor) -> f64 {
        let mut g = Graph::new(store, self.mode);
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    /// Relative error `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over `coords`.
    pub fn relative_error(&self, coords: &[Coord]) -> f64 {
        let mut g = Graph::new(self.store, self.mode);
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        let shape = g.value(out).shape().to_vec();
        let r = random(&shape, -1.0, 1.0, &mut Stream::new(99));
        let bw = g.backward(out, r.clone()).unwrap();
        let analytic: Vec<f64> = coords
            .iter()
            .map(|c| match *c {
                Coord::Param(id, i) => bw.params.get(id).map_or(0.0, |t| t.data()[i]),
                Coord::Leaf(l, i) => bw.leaves.iter().find(|(v, _)| *v == vars[l]).map_or(0.0, |(_, t)| t.data()[i]),
            })
            .collect();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|c| {
                let eval = |delta: f64| match *c {
                    Coord::Param(id, i) => {
                        let mut s = self.store.clone();
                        s.value_mut(id).data_mut()[i] += delta;
                        self.value(&s, &self.leaves, &r)
                    }
                    Coord::Leaf(l, i) => {
                        let mut leaves = self.leaves.clone();
                        leaves[l].data_mut()[i] += delta;
                        self.value(self.store, &leaves, &r)
                    }
                };
                (eval(EPS) - eval(-EPS)) / (2.0 * EPS)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        assert!(scale > 1e-8, "gradient vanished; the check would be vacuous");
        norm(&diff) / scale
    }
}

pub fn all_params(store: &ParamStore) -> Vec<Coord> {
    store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(id, e)| (0..e.value.len()).map(move |i| Coord::Param(ParamId(id), i)))
        .collect()
}

pub fn all_leaf(l: usize, t: &Tensor) -> Vec<Coord> {
    (0..t.len()).map(|i| Coord::Leaf(l, i)).collect()
}

pub fn sampled(mut coords: Vec<Coord>, n: usize, rng: &mut Stream) -> Vec<Coord> {
    rng.shuffle(&mut coords);
    coords.truncate(n);
    coords
}

/// One LIF neuron over four steps, gradient with respect to its input.
pub fn lif_neuron_error() -> f64 {
    let store = ParamStore::new();
    let x = Tensor::from_vec(&[4, 1], vec![0.7, 0.9, 0.2, 1.3]).unwrap();
    let check = Check {
        store: &store,
        leaves: vec![x.clone()],
        mode: Mode { train: false, smooth: true },
        build: |g: &mut Graph<'_>, v: &[Var]| g.lif(v[0], 4, smooth_lif(), "n").unwrap(),
    };
    check.relative_error(&all_leaf(0, &x))
}

/// One SEW block on a 4x4 input, parameters and input.
pub fn sew_block_error() -> f64 {
    let (t, b) = (4, 2);
    let block = SewBlock::new("blk", 2, 3, 1);
    let mut store = ParamStore::new();
    block.register(&mut store, &mut Stream::new(3)).unwrap();
    let x = random(&[t * b, 2, 4, 4], 0.0, 1.0, &mut Stream::new(4));
    let check = Check {
        store: &store,
        leaves: vec![x.clone()],
        mode: Mode { train: true, smooth: true },
        build: |g: &mut Graph<'_>, v: &[Var]| block.forward(g, v[0], t, smooth_lif()).unwrap(),
    };
    let mut coords = all_params(&store);
    coords.extend(all_leaf(0, &x));
    check.relative_error(&coords)
}

/// CDA weighting followed by aggregation, parameters and sub-descriptors.
pub fn cda_path_error() -> f64 {
    let (t, b, c) = (4, 2, 6);
    let head = CdaHead { prefix: "cda".into(), channels: c, hidden: 5 };
    let mut store = ParamStore::new();
    head.register(&mut store, &mut Stream::new(5)).unwrap();
    let mut rng = Stream::new(6);
    let subs: Vec<Tensor> = (0..3).map(|_| random(&[t * b, c], 0.0, 1.0, &mut rng)).collect();
    let check = Check {
        store: &store,
        leaves: subs.clone(),
        mode: Mode { train: false, smooth: true },
        build: |g: &mut Graph<'_>, v: &[Var]| {
            let s = [v[0], v[1], v[2]];
            let w = head.weights(g, s, t, smooth_lif()).unwrap();
            aggregate(g, s, w, t).unwrap()
        },
    };
    let mut coords = all_params(&store);
    for (l, s) in subs.iter().enumerate() {
        coords.extend(all_leaf(l, s));
    }
    check.relative_error(&coords)
}
