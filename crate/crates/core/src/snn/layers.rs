//! Parameter registration and composite layers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{ConvGeom, Graph, Var};
use super::lif::LifParams;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Stream;
use crate::tensor::{SpikeTensor, Tensor};

/// Kaiming-normal tensor (`std = sqrt(2 / fan_in)`).
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Stream) -> Tensor {
    let std = math::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal() * std).collect()).expect("shape matches length")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual fully-connected default.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Stream) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(-bound, bound)).collect()).expect("shape matches length")
}

/// Register a batch-norm layer (`weight`, `bias`, running buffers) under `prefix`.
pub fn register_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.add(format!("{prefix}.weight"), Tensor::filled(&[channels], 1.0), true)?;
    store.add(format!("{prefix}.bias"), Tensor::zeros(&[channels]), true)?;
    store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?;
    store.add(format!("{prefix}.running_var"), Tensor::filled(&[channels], 1.0), false)?;
    Ok(())
}

pub fn bn_forward(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let store = g.store();
    let gamma = g.param_named(&format!("{prefix}.weight"))?;
    let beta = g.param_named(&format!("{prefix}.bias"))?;
    let rm = store.expect_id(&format!("{prefix}.running_mean"))?;
    let rv = store.expect_id(&format!("{prefix}.running_var"))?;
    g.batch_norm(x, gamma, beta, (rm, rv))
}

/// Bias-free convolution followed by batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: String,
    pub bn: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub geom: ConvGeom,
}

impl ConvBn {
    pub fn new(conv: impl Into<String>, bn: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { conv: conv.into(), bn: bn.into(), cin, cout, k, geom: ConvGeom { stride, pad: k / 2 } }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        let shape = [self.cout, self.cin, self.k, self.k];
        store.add(format!("{}.weight", self.conv), kaiming(&shape, self.cin * self.k * self.k, rng), true)?;
        register_bn(store, &self.bn, self.cout)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param_named(&format!("{}.weight", self.conv))?;
        let y = g.conv2d(x, w, self.geom)?;
        bn_forward(g, &self.bn, y)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |l: usize| (l + 2 * self.geom.pad - self.k) / self.geom.stride + 1;
        (f(h), f(w))
    }
}

/// Spike-element-wise residual block:
/// `O = LIF2(BN(Conv(LIF1(BN(Conv(x))))) + skip(x))`, where `skip` is the
/// identity or, when stride or width changes, a 1x1 conv + BN projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SewBlock {
    pub prefix: String,
    pub first: ConvBn,
    pub second: ConvBn,
    pub projection: Option<ConvBn>,
}

impl SewBlock {
    pub fn new(prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let projection = (stride != 1 || cin != cout).then(|| {
            ConvBn::new(format!("{prefix}.downsample.conv"), format!("{prefix}.downsample.bn"), cin, cout, 1, stride)
        });
        Self {
            prefix: prefix.into(),
            first: ConvBn::new(format!("{prefix}.conv1"), format!("{prefix}.bn1"), cin, cout, 3, stride),
            second: ConvBn::new(format!("{prefix}.conv2"), format!("{prefix}.bn2"), cout, cout, 3, 1),
            projection,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        self.first.register(store, rng)?;
        self.second.register(store, rng)?;
        if let Some(p) = &self.projection {
            p.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, steps: usize, lif: LifParams) -> Result<Var> {
        let a = self.first.forward(g, x)?;
        let s1 = g.lif(a, steps, lif, &format!("{}.lif1", self.prefix))?;
        let residual = self.second.forward(g, s1)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let sum = g.add(residual, skip)?;
        g.lif(sum, steps, lif, &format!("{}.lif2", self.prefix))
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.first.out_hw(h, w)
    }
}

/// Inference-mode forward of one block on a single `(T, C, H, W)` sample.
pub fn sew_block_forward(store: &ParamStore, block: &SewBlock, input: &SpikeTensor, lif: LifParams) -> Result<SpikeTensor> {
    let [t, c, h, w] = input.dims();
    if c != block.first.cin {
        return Err(Error::Shape(format!("block expects {} channels, got {c}", block.first.cin)));
    }
    let mut g = Graph::new(store, super::Mode::EVAL);
    let x = g.input(input.to_tensor().reshape(&[t, c, h, w])?);
    let y = block.forward(&mut g, x, t, lif)?;
    let out = g.value(y);
    let s = out.shape();
    SpikeTensor::from_values([t, s[1], s[2], s[3]], out.data())
}

/// Whether a layer's input is binary spikes or real values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Spikes,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { k: usize, stride: usize, pad: usize },
    /// Applied `rows` times per time step per sample.
    Linear { rows: usize },
    BatchNorm,
    Lif,
    MaxPool,
    GlobalAvgPool,
}

/// Static description of one layer for shape bookkeeping and op counting.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// `(C, H, W)`; linear layers use `(features, 1, 1)`.
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub input: ActivationKind,
    /// Trainable scalars owned by the layer.
    pub params: usize,
}

impl LayerSpec {
    /// Synaptic operations for one time step of one sample when every input fires.
    pub fn dense_ops_per_step(&self) -> u64 {
        let [ci, _, _] = self.in_shape;
        let [co, ho, wo] = self.out_shape;
        match self.kind {
            LayerKind::Conv { k, .. } => (ho * wo * co * k * k * ci) as u64,
            LayerKind::Linear { rows } => (rows * ci * co) as u64,
            _ => 0,
        }
    }
}

/// Ordered layer list of a network, with the time-step count it runs for.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub layers: Vec<LayerSpec>,
    pub steps: usize,
}

impl NetworkGraph {
    /// Check that every conv layer's output shape follows from its input shape.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if let LayerKind::Conv { k, stride, pad } = l.kind {
                let f = |n: usize| (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1);
                let (ho, wo) = (f(l.in_shape[1]), f(l.in_shape[2]));
                if ho != Some(l.out_shape[1]) || wo != Some(l.out_shape[2]) {
                    return Err(Error::Shape(format!("layer {} does not chain: {:?} -> {:?}", l.name, l.in_shape, l.out_shape)));
                }
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }
}
