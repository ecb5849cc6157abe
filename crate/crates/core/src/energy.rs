//! Synaptic operation counting and the 45 nm energy model
//! (4.6 pJ per multiply-accumulate, 0.9 pJ per accumulate).
//!
//! Layers fed by real values perform MACs; layers fed by binary spikes
//! perform one AC per emitted spike and synapse. Batch-norm, pooling and
//! bias additions are not counted.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::descriptor::Model;
use crate::error::{Error, Result};
use crate::event::EventVolume;
use crate::snn::{ActivationKind, Graph, LayerKind, Mode, NetworkGraph};

pub const PJ_PER_MAC: f64 = 4.6;
pub const PJ_PER_AC: f64 = 0.9;
/// Firing rate assumed by [`OpMode::SnnStatic`] when none is given.
pub const DEFAULT_STATIC_RATE: f64 = 0.15;

/// Energy in millijoules of `ac` accumulates and `mac` multiply-accumulates.
pub fn energy_from_counts(ac: f64, mac: f64) -> f64 {
    (PJ_PER_AC * ac + PJ_PER_MAC * mac) * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpMode {
    /// Every synaptic operation is a MAC, for a single pass.
    Ann,
    /// Spike-fed layers fire at an assumed rate.
    SnnStatic { rate: f64 },
    /// Spike-fed layers use recorded spike counts.
    SnnMeasured,
}

impl OpMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpMode::Ann => "ann",
            OpMode::SnnStatic { .. } => "snn-static",
            OpMode::SnnMeasured => "snn-measured",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOps {
    pub name: String,
    pub ac: f64,
    pub mac: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCountReport {
    pub mode: OpMode,
    pub steps: usize,
    pub layers: Vec<LayerOps>,
    pub ac: f64,
    pub mac: f64,
    pub params: usize,
    pub energy_mj: f64,
}

/// Per-sample synaptic operations recorded from actual inputs, keyed by
/// weight name. Spike-fed layers count `sum over nonzero inputs of fan-out`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasuredOps {
    pub layers: Vec<(String, f64)>,
    pub samples: usize,
}

impl MeasuredOps {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.layers.iter().find(|l| l.0 == name).map(|l| l.1)
    }
}

/// Count operations per synaptic layer of `net` for one sample.
pub fn count_ops(net: &NetworkGraph, mode: OpMode, measured: Option<&MeasuredOps>) -> Result<OpCountReport> {
    net.validate()?;
    if let OpMode::SnnStatic { rate } = mode {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("firing rate must lie in [0, 1], got {rate}")));
        }
    }
    if mode == OpMode::SnnMeasured && measured.is_none() {
        return Err(Error::Config("snn-measured mode needs recorded spikes".into()));
    }
    let t = net.steps as f64;
    let mut layers = Vec::new();
    for l in &net.layers {
        let (ac, mac) = match l.kind {
            LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                let dense = l.dense_ops_per_step() as f64;
                match (mode, l.input) {
                    (OpMode::Ann, _) => (0.0, dense),
                    (_, ActivationKind::Real) => (0.0, dense * t),
                    (OpMode::SnnStatic { rate }, ActivationKind::Spikes) => (rate * dense * t, 0.0),
                    (_, ActivationKind::Spikes) => {
                        let m = measured.and_then(|m| m.get(&l.name));
                        (m.ok_or_else(|| Error::Config(format!("no recording for layer {}", l.name)))?, 0.0)
                    }
                }
            }
            _ => (0.0, 0.0),
        };
        layers.push(LayerOps { name: l.name.clone(), ac, mac, params: l.params });
    }
    let ac = layers.iter().map(|l| l.ac).sum();
    let mac = layers.iter().map(|l| l.mac).sum();
    Ok(OpCountReport {
        mode,
        steps: if mode == OpMode::Ann { 1 } else { net.steps },
        params: net.total_params(),
        energy_mj: energy_from_counts(ac, mac),
        layers,
        ac,
        mac,
    })
}

/// Number of `(output, tap)` pairs that read input index `i` along one axis.
fn axis_fanout(in_len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> Vec<u64> {
    let mut f = vec![0u64; in_len];
    for o in 0..out_len {
        for tap in 0..k {
            let i = (o * stride + tap) as isize - pad as isize;
            if i >= 0 && (i as usize) < in_len {
                f[i as usize] += 1;
            }
        }
    }
    f
}

/// Gated synaptic operations of every conv and linear node recorded on `g`,
/// divided by `samples`.
pub fn measure_ops(g: &Graph<'_>, samples: usize) -> MeasuredOps {
    let mut layers = Vec::new();
    for node in g.synaptic_nodes() {
        let x = node.input;
        let total: u64 = match node.geom {
            Some(geom) => {
                let (xs, ws, os) = (x.shape(), node.weight_shape, node.output_shape);
                let (h, w) = (xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let fy = axis_fanout(h, os[2], k, geom.stride, geom.pad);
                let fx = axis_fanout(w, os[3], k, geom.stride, geom.pad);
                let mut sum = 0u64;
                for (i, &v) in x.data().iter().enumerate() {
                    if v != 0.0 {
                        let (yy, xx) = ((i / w) % h, i % w);
                        sum += fy[yy] * fx[xx];
                    }
                }
                sum * co as u64
            }
            None => {
                let out = node.weight_shape[0] as u64;
                x.data().iter().filter(|&&v| v != 0.0).count() as u64 * out
            }
        };
        let per_sample = total as f64 / samples.max(1) as f64;
        match layers.iter_mut().find(|(n, _): &&mut (String, f64)| n == node.weight) {
            Some(slot) => slot.1 += per_sample,
            None => layers.push((String::from(node.weight), per_sample)),
        }
    }
    MeasuredOps { layers, samples }
}

/// `(layer, spikes / (neurons * T))` for every LIF node recorded on `g`.
pub fn measure_spike_rates(g: &Graph<'_>) -> Vec<(String, f64)> {
    g.lif_outputs()
        .into_iter()
        .map(|(name, s)| (String::from(name), if s.is_empty() { 0.0 } else { s.sum() / s.len() as f64 }))
        .collect()
}

/// Recorded ops and firing rates of the model on a batch of volumes.
pub fn measure_model(model: &Model, volumes: &[&EventVolume], seeds: &[u64]) -> Result<(MeasuredOps, Vec<(String, f64)>)> {
    let mut g = Graph::new(&model.store, Mode::EVAL);
    model.forward_volumes(&mut g, volumes, seeds)?;
    Ok((measure_ops(&g, volumes.len()), measure_spike_rates(&g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{ConvGeom, LayerSpec, LifParams, ParamStore};
    use crate::tensor::Tensor;

    fn round3(x: f64) -> f64 {
        (x * 1000.0).round() / 1000.0
    }

    #[test]
    fn table_cells() {
        assert_eq!(energy_from_counts(0.0, 0.0), 0.0);
        assert!((energy_from_counts(1e9, 0.0) - 0.9).abs() < 1e-12);
        assert_eq!(round3(energy_from_counts(0.0, 4.38e9)), 20.148);
        assert_eq!(round3(energy_from_counts(0.47e9, 1.03e9)), 5.161);
        assert_eq!(round3(energy_from_counts(0.87e9, 1.03e9)), 5.521);
        assert_eq!(round3(energy_from_counts(0.0, 8.61e9)), 39.606);
    }

    fn toy_conv(input: ActivationKind) -> NetworkGraph {
        NetworkGraph {
            layers: vec![LayerSpec {
                name: "conv.weight".into(),
                kind: LayerKind::Conv { k: 3, stride: 1, pad: 1 },
                in_shape: [2, 4, 4],
                out_shape: [3, 4, 4],
                input,
                params: 54,
            }],
            steps: 4,
        }
    }

    #[test]
    fn ann_conv_mac_matches_loop_count() {
        let mut n = 0u64;
        for _co in 0..3 {
            for _oy in 0..4 {
                for _ox in 0..4 {
                    for _ci in 0..2 {
                        for _ky in 0..3 {
                            for _kx in 0..3 {
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        let r = count_ops(&toy_conv(ActivationKind::Spikes), OpMode::Ann, None).unwrap();
        assert_eq!(r.mac, n as f64);
        assert_eq!(r.ac, 0.0);
    }

    #[test]
    fn static_and_measured_modes() {
        let net = toy_conv(ActivationKind::Spikes);
        let r = count_ops(&net, OpMode::SnnStatic { rate: 0.0 }, None).unwrap();
        assert_eq!((r.ac, r.mac, r.energy_mj), (0.0, 0.0, 0.0));
        let r = count_ops(&net, OpMode::SnnStatic { rate: 0.5 }, None).unwrap();
        assert_eq!(r.ac, 0.5 * 864.0 * 4.0);
        assert!(count_ops(&net, OpMode::SnnMeasured, None).is_err());
        let m = MeasuredOps { layers: vec![("conv.weight".into(), 123.0)], samples: 1 };
        assert_eq!(count_ops(&net, OpMode::SnnMeasured, Some(&m)).unwrap().ac, 123.0);
        let real = count_ops(&toy_conv(ActivationKind::Real), OpMode::SnnStatic { rate: 0.1 }, None).unwrap();
        assert_eq!((real.ac, real.mac), (0.0, 864.0 * 4.0));
    }

    #[test]
    fn measured_ops_dense_input_equals_closed_form() {
        let mut store = ParamStore::new();
        let w = store.add("conv.weight", Tensor::filled(&[3, 2, 3, 3], 0.1), true).unwrap();
        let mut g = Graph::new(&store, Mode::EVAL);
        let x = g.input(Tensor::filled(&[4, 2, 4, 4], 1.0));
        let wv = g.param(w);
        g.conv2d(x, wv, ConvGeom { stride: 1, pad: 1 }).unwrap();
        let m = measure_ops(&g, 1);
        // Padding taps are not synapses: only in-bounds taps count.
        let mut valid = 0u64;
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                for ky in -1..=1 {
                    for kx in -1..=1 {
                        valid += ((0..4).contains(&(oy + ky)) && (0..4).contains(&(ox + kx))) as u64;
                    }
                }
            }
        }
        assert_eq!(m.get("conv.weight").unwrap(), (valid * 3 * 2 * 4) as f64);
    }

    #[test]
    fn spike_rates() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::EVAL);
        let mut cur = vec![0.0; 12];
        cur[0] = 1.0;
        cur[5] = 2.0;
        cur[11] = 1.5;
        let x = g.input(Tensor::from_vec(&[4, 3], cur).unwrap());
        g.lif(x, 4, LifParams::default(), "toy").unwrap();
        assert_eq!(measure_spike_rates(&g), vec![(String::from("toy"), 0.25)]);
        let mut g = Graph::new(&store, Mode::EVAL);
        let x = g.input(Tensor::zeros(&[4, 3]));
        g.lif(x, 4, LifParams::default(), "zero").unwrap();
        assert_eq!(measure_spike_rates(&g)[0].1, 0.0);
        let mut g = Graph::new(&store, Mode::EVAL);
        let x = g.input(Tensor::filled(&[4, 3], 5.0));
        g.lif(x, 4, LifParams::default(), "sat").unwrap();
        assert_eq!(measure_spike_rates(&g)[0].1, 1.0);
    }
}
