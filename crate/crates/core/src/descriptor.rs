//! Dual-stream spiking descriptor network.
//!
//! Two independent 13-conv spiking residual encoders consume the
//! multi-channel and time-surface spike tensors. Their binary feature maps
//! are split into a shared part (AND) and two specific parts (AND-NOT),
//! pooled into per-step channel descriptors, and fused by a small spiking
//! attention head into one unit-norm global descriptor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::event::EventVolume;
use crate::math;
use crate::repr::{self, SmlpEncoder};
use crate::rng::{label, Stream};
use crate::snn::layers::uniform_fan_in;
use crate::snn::{
    ActivationKind, ConvBn, Graph, LayerKind, LayerSpec, LifParams, Mode, NetworkGraph, ParamStore, SewBlock, Var,
};
use crate::tensor::{SpikeTensor, Tensor};

/// Parameter-name prefixes of the four sub-networks.
pub const SMLP_PREFIX: &str = "smlp";
pub const MCS_PREFIX: &str = "mcs";
pub const TSS_PREFIX: &str = "tss";
pub const CDA_PREFIX: &str = "cda";

/// Number of sub-descriptors (shared, MCS-specific, TSS-specific).
pub const SUBDESCRIPTORS: usize = 3;

/// Eval-mode batches are chunked to bound memory.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub steps: usize,
    /// Multiplier on the (64, 128, 256) encoder widths.
    pub scale: f64,
    pub smlp_hidden: usize,
    pub cda_hidden: usize,
    pub lif: LifParams,
    /// Time-surface decay constant, seconds.
    pub eta_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: repr::DEFAULT_STEPS,
            scale: 1.0,
            smlp_hidden: repr::DEFAULT_SMLP_HIDDEN,
            cda_hidden: 64,
            lif: LifParams::default(),
            eta_s: repr::DEFAULT_ETA_S,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.smlp_hidden == 0 || self.cda_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.eta_s > 0.0) || !self.eta_s.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta_s)));
        }
        Ok(())
    }

    /// Scaled stage widths.
    pub fn widths(&self) -> [usize; 3] {
        [64, 128, 256].map(|w| (math::round(w as f64 * self.scale) as usize).max(1))
    }

    /// Encoder output channels, also the attention head's input width.
    pub fn channels(&self) -> usize {
        self.widths()[2]
    }
}

/// 13-conv spiking residual encoder: stem conv 7x7/2 -> BN -> LIF ->
/// max-pool 3x3/2, then three stages of two SEW blocks, stages 2 and 3
/// striding by 2. Output is `H/16 x W/16`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sr13 {
    pub prefix: String,
    pub stem: ConvBn,
    pub blocks: Vec<SewBlock>,
}

impl Sr13 {
    pub fn new(prefix: &str, in_channels: usize, widths: [usize; 3]) -> Self {
        let stem = ConvBn::new(format!("{prefix}.stem.conv"), format!("{prefix}.stem.bn"), in_channels, widths[0], 7, 2);
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            blocks.push(SewBlock::new(&format!("{prefix}.layer{}.0", s + 1), cin, w, stride));
            blocks.push(SewBlock::new(&format!("{prefix}.layer{}.1", s + 1), w, w, 1));
            cin = w;
        }
        Self { prefix: prefix.into(), stem, blocks }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        self.stem.register(store, rng)?;
        self.blocks.iter().try_for_each(|b| b.register(store, rng))
    }

    /// `[T*B, C_in, H, W]` spikes to `[T*B, C, H/16, W/16]` spikes.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, steps: usize, lif: LifParams) -> Result<Var> {
        let y = self.stem.forward(g, x)?;
        let y = g.lif(y, steps, lif, &format!("{}.stem.lif", self.prefix))?;
        let mut y = g.max_pool(y)?;
        for b in &self.blocks {
            y = b.forward(g, y, steps, lif)?;
        }
        Ok(y)
    }

    /// Main-path conv layers (projections excluded).
    pub fn conv_layers(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (h, w) = self.stem.out_hw(h, w);
        let pool = |l: usize| (l + 2 - 3) / 2 + 1;
        self.blocks.iter().fold((pool(h), pool(w)), |(h, w), b| b.out_hw(h, w))
    }

    fn push_layers(&self, out: &mut Vec<LayerSpec>, steps_h_w: (usize, usize)) {
        let (h, w) = steps_h_w;
        let conv = |c: &ConvBn, h: usize, w: usize| {
            let (ho, wo) = c.out_hw(h, w);
            LayerSpec {
                name: format!("{}.weight", c.conv),
                kind: LayerKind::Conv { k: c.k, stride: c.geom.stride, pad: c.geom.pad },
                in_shape: [c.cin, h, w],
                out_shape: [c.cout, ho, wo],
                input: ActivationKind::Spikes,
                params: c.cout * c.cin * c.k * c.k,
            }
        };
        let simple = |name: String, kind, shape: [usize; 3], input, params| LayerSpec {
            name,
            kind,
            in_shape: shape,
            out_shape: shape,
            input,
            params,
        };
        let stem = conv(&self.stem, h, w);
        let s = stem.out_shape;
        out.push(stem);
        out.push(simple(self.stem.bn.clone(), LayerKind::BatchNorm, s, ActivationKind::Real, 2 * s[0]));
        out.push(simple(format!("{}.stem.lif", self.prefix), LayerKind::Lif, s, ActivationKind::Real, 0));
        let pooled = [s[0], (s[1] + 2 - 3) / 2 + 1, (s[2] + 2 - 3) / 2 + 1];
        out.push(LayerSpec {
            name: format!("{}.stem.pool", self.prefix),
            kind: LayerKind::MaxPool,
            in_shape: s,
            out_shape: pooled,
            input: ActivationKind::Spikes,
            params: 0,
        });
        let mut cur = pooled;
        for b in &self.blocks {
            let c1 = conv(&b.first, cur[1], cur[2]);
            let mid = c1.out_shape;
            out.push(c1);
            out.push(simple(b.first.bn.clone(), LayerKind::BatchNorm, mid, ActivationKind::Real, 2 * mid[0]));
            out.push(simple(format!("{}.lif1", b.prefix), LayerKind::Lif, mid, ActivationKind::Real, 0));
            out.push(conv(&b.second, mid[1], mid[2]));
            out.push(simple(b.second.bn.clone(), LayerKind::BatchNorm, mid, ActivationKind::Real, 2 * mid[0]));
            if let Some(p) = &b.projection {
                out.push(conv(p, cur[1], cur[2]));
                out.push(simple(p.bn.clone(), LayerKind::BatchNorm, mid, ActivationKind::Real, 2 * mid[0]));
            }
            out.push(simple(format!("{}.lif2", b.prefix), LayerKind::Lif, mid, ActivationKind::Real, 0));
            cur = mid;
        }
    }
}

/// Attention head: `FC(C -> hidden) -> LIF -> FC(hidden -> 3)`, averaged over
/// time and softmaxed into sub-descriptor weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CdaHead {
    pub prefix: String,
    pub channels: usize,
    pub hidden: usize,
}

impl CdaHead {
    pub fn register(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        let p = &self.prefix;
        store.add(format!("{p}.fc1.weight"), uniform_fan_in(&[self.hidden, self.channels], self.channels, rng), true)?;
        store.add(format!("{p}.fc1.bias"), uniform_fan_in(&[self.hidden], self.channels, rng), true)?;
        store.add(format!("{p}.fc2.weight"), uniform_fan_in(&[SUBDESCRIPTORS, self.hidden], self.hidden, rng), true)?;
        store.add(format!("{p}.fc2.bias"), uniform_fan_in(&[SUBDESCRIPTORS], self.hidden, rng), true)?;
        Ok(())
    }

    /// Weights `[B, 3]` from sub-descriptors `[T*B, C]`.
    pub fn weights(&self, g: &mut Graph<'_>, subs: [Var; 3], steps: usize, lif: LifParams) -> Result<Var> {
        let p = &self.prefix;
        let sum = g.add(subs[0], subs[1])?;
        let sum = g.add(sum, subs[2])?;
        let (w1, b1) = (g.param_named(&format!("{p}.fc1.weight"))?, g.param_named(&format!("{p}.fc1.bias"))?);
        let (w2, b2) = (g.param_named(&format!("{p}.fc2.weight"))?, g.param_named(&format!("{p}.fc2.bias"))?);
        let h = g.linear(sum, w1, b1)?;
        let s = g.lif(h, steps, lif, &format!("{p}.lif"))?;
        let o = g.linear(s, w2, b2)?;
        let o = g.mean_time(o, steps)?;
        g.softmax(o)
    }
}

/// Time-average each sub-descriptor, intra-normalize, weight, concatenate
/// and L2-normalize: `[T*B, C] x3, [B, 3] -> [B, 3C]`.
pub fn aggregate(g: &mut Graph<'_>, subs: [Var; 3], weights: Var, steps: usize) -> Result<Var> {
    let mut parts = [subs[0]; 3];
    for (i, &d) in subs.iter().enumerate() {
        let m = g.mean_time(d, steps)?;
        let m = g.row_l2_norm(m)?;
        parts[i] = g.scale_by_column(m, weights, i)?;
    }
    let cat = g.concat_columns(&parts)?;
    g.row_l2_norm(cat)
}

/// Shared / specific split of two binary maps, recorded on the tape.
pub fn ssd_graph(g: &mut Graph<'_>, mcs: Var, tss: Var) -> Result<[Var; 3]> {
    let shared = g.mul(mcs, tss)?;
    let only_mcs = g.sub(mcs, shared)?;
    let only_tss = g.sub(tss, shared)?;
    Ok([shared, only_mcs, only_tss])
}

/// Global average pool followed by per-step L2 normalization: `[N, C, H, W] -> [N, C]`.
pub fn pool_graph(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let m = g.spatial_mean(x)?;
    g.row_l2_norm(m)
}

/// Tape handles of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, 3C]`.
    pub descriptor: Var,
    /// `[B, 3]`.
    pub weights: Var,
    /// `[T*B, C]` each.
    pub subs: [Var; 3],
    pub maps: [Var; 2],
}

/// The full descriptor model and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub smlp: SmlpEncoder,
    pub mcs_net: Sr13,
    pub tss_net: Sr13,
    pub cda: CdaHead,
}

impl Model {
    /// Network structure only, with an empty parameter store.
    pub fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        Ok(Self {
            config,
            store: ParamStore::new(),
            smlp: SmlpEncoder::new(SMLP_PREFIX, config.smlp_hidden, config.steps, config.lif),
            mcs_net: Sr13::new(MCS_PREFIX, 2, widths),
            tss_net: Sr13::new(TSS_PREFIX, 2, widths),
            cda: CdaHead { prefix: CDA_PREFIX.into(), channels: config.channels(), hidden: config.cda_hidden },
        })
    }

    /// Freshly initialized model; each sub-network draws from its own labelled stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(config)?;
        let mut store = ParamStore::new();
        m.smlp.register(&mut store, &mut Stream::keyed(seed, &[label("init.smlp")]))?;
        m.mcs_net.register(&mut store, &mut Stream::keyed(seed, &[label("init.mcs")]))?;
        m.tss_net.register(&mut store, &mut Stream::keyed(seed, &[label("init.tss")]))?;
        m.cda.register(&mut store, &mut Stream::keyed(seed, &[label("init.cda")]))?;
        m.store = store;
        Ok(m)
    }

    /// Replace all parameters, requiring the same names and shapes as a fresh model.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        let reference = Self::new(self.config, 0)?.store;
        if reference.len() != store.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", reference.len(), store.len())));
        }
        for (r, e) in reference.entries().iter().zip(store.entries()) {
            if r.name != e.name || r.value.shape() != e.value.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    r.name,
                    r.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// Record the network from batched spike inputs `[T*B, 2, H, W]`.
    pub fn forward_inputs(&self, g: &mut Graph<'_>, mcs: Var, tss: Var) -> Result<Forward> {
        let (t, lif) = (self.config.steps, self.config.lif);
        if g.value(mcs).shape() != g.value(tss).shape() {
            return Err(Error::Shape(format!(
                "stream inputs differ: {:?} vs {:?}",
                g.value(mcs).shape(),
                g.value(tss).shape()
            )));
        }
        let m = self.mcs_net.forward(g, mcs, t, lif)?;
        let s = self.tss_net.forward(g, tss, t, lif)?;
        let x = ssd_graph(g, m, s)?;
        let subs = [pool_graph(g, x[0])?, pool_graph(g, x[1])?, pool_graph(g, x[2])?];
        let weights = self.cda.weights(g, subs, t, lif)?;
        let descriptor = aggregate(g, subs, weights, t)?;
        Ok(Forward { descriptor, weights, subs, maps: [m, s] })
    }

    /// Record the full pipeline for a batch of volumes, with one TSS sampling seed per volume.
    pub fn forward_volumes(&self, g: &mut Graph<'_>, volumes: &[&EventVolume], tss_seeds: &[u64]) -> Result<Forward> {
        if volumes.len() != tss_seeds.len() {
            return Err(Error::Shape("one sampling seed per volume required".into()));
        }
        let mcs = self.smlp.mcs_input(g, volumes)?;
        let tss = self.tss_batch(volumes, tss_seeds)?;
        let tss = g.input(tss);
        self.forward_inputs(g, mcs, tss)
    }

    /// Sampled time-surface spikes for a batch, laid out `[T*B, 2, H, W]`.
    pub fn tss_batch(&self, volumes: &[&EventVolume], seeds: &[u64]) -> Result<Tensor> {
        let res = repr::common_resolution(volumes)?;
        let (t, b) = (self.config.steps, volumes.len());
        let plane = 2 * res.pixels();
        let mut data = vec![0.0; t * b * plane];
        for (i, (v, &seed)) in volumes.iter().zip(seeds).enumerate() {
            let map = repr::build_ts_map(v, self.config.eta_s)?;
            let spikes = repr::sample_tss_tensor(&map, t, seed)?.to_values();
            for step in 0..t {
                data[(step * b + i) * plane..][..plane].copy_from_slice(&spikes[step * plane..][..plane]);
            }
        }
        Tensor::from_vec(&[t * b, 2, res.height as usize, res.width as usize], data)
    }

    /// Eval-mode descriptors for `volumes`, one TSS seed each. Empty volumes
    /// yield the zero descriptor flagged degenerate.
    pub fn describe_volumes(&self, volumes: &[&EventVolume], seeds: &[u64]) -> Result<Vec<DescriptorSet>> {
        if volumes.len() != seeds.len() {
            return Err(Error::Shape("one sampling seed per volume required".into()));
        }
        let mut out = Vec::with_capacity(volumes.len());
        for (vs, ss) in volumes.chunks(EVAL_CHUNK).zip(seeds.chunks(EVAL_CHUNK)) {
            let mut g = Graph::new(&self.store, Mode::EVAL);
            let f = self.forward_volumes(&mut g, vs, ss)?;
            for (b, v) in vs.iter().enumerate() {
                let set = self.extract(&g, &f, b, vs.len());
                out.push(if v.is_empty() { DescriptorSet::degenerate(self.config.steps, self.config.channels()) } else { set });
            }
        }
        Ok(out)
    }

    /// Descriptor of precomputed spike tensors (each `(T, 2, H, W)`).
    pub fn describe_tensors(&self, mcs: &SpikeTensor, tss: &SpikeTensor) -> Result<DescriptorSet> {
        let mut g = Graph::new(&self.store, Mode::EVAL);
        let (m, s) = self.stream_inputs(&mut g, mcs, tss)?;
        let f = self.forward_inputs(&mut g, m, s)?;
        Ok(self.extract(&g, &f, 0, 1))
    }

    fn stream_inputs(&self, g: &mut Graph<'_>, mcs: &SpikeTensor, tss: &SpikeTensor) -> Result<(Var, Var)> {
        let d = mcs.dims();
        if d != tss.dims() {
            return Err(Error::Shape(format!("stream inputs differ: {:?} vs {:?}", d, tss.dims())));
        }
        if d[0] != self.config.steps || d[1] != 2 {
            return Err(Error::Shape(format!("expected ({}, 2, H, W) input, got {d:?}", self.config.steps)));
        }
        let m = g.input(mcs.to_tensor());
        let s = g.input(tss.to_tensor());
        Ok((m, s))
    }

    fn extract(&self, g: &Graph<'_>, f: &Forward, b: usize, batch: usize) -> DescriptorSet {
        let (t, c) = (self.config.steps, self.config.channels());
        let sub = |v: Var| {
            let data = g.value(v).data();
            (0..t).flat_map(|s| data[(s * batch + b) * c..][..c].iter().copied()).collect::<Vec<f64>>()
        };
        let w = &g.value(f.weights).data()[b * SUBDESCRIPTORS..][..SUBDESCRIPTORS];
        let descriptor = g.value(f.descriptor).data()[b * SUBDESCRIPTORS * c..][..SUBDESCRIPTORS * c].to_vec();
        let degenerate = descriptor.iter().all(|&v| v == 0.0);
        DescriptorSet {
            steps: t,
            channels: c,
            subs: [sub(f.subs[0]), sub(f.subs[1]), sub(f.subs[2])],
            weights: [w[0], w[1], w[2]],
            descriptor,
            degenerate,
        }
    }

    /// Static layer list for op counting on `height x width` inputs. The
    /// encoder is included only when the per-volume event count is known.
    pub fn network_graph(&self, height: usize, width: usize, events: Option<usize>) -> NetworkGraph {
        let mut layers = Vec::new();
        let (t, m, c, hid) = (self.config.steps, self.config.smlp_hidden, self.config.channels(), self.config.cda_hidden);
        let fc = |name: String, rows, din, dout, input| LayerSpec {
            name,
            kind: LayerKind::Linear { rows },
            in_shape: [din, 1, 1],
            out_shape: [dout, 1, 1],
            input,
            params: din * dout + dout,
        };
        if let Some(e) = events {
            layers.push(fc(format!("{SMLP_PREFIX}.fc1.weight"), e, 1, m, ActivationKind::Real));
            layers.push(fc(format!("{SMLP_PREFIX}.fc2.weight"), e, m, t, ActivationKind::Spikes));
        }
        for net in [&self.mcs_net, &self.tss_net] {
            net.push_layers(&mut layers, (height, width));
            let (ho, wo) = net.out_hw(height, width);
            layers.push(LayerSpec {
                name: format!("{}.gap", net.prefix),
                kind: LayerKind::GlobalAvgPool,
                in_shape: [c, ho, wo],
                out_shape: [c, 1, 1],
                input: ActivationKind::Spikes,
                params: 0,
            });
        }
        layers.push(fc(format!("{CDA_PREFIX}.fc1.weight"), 1, c, hid, ActivationKind::Real));
        layers.push(fc(format!("{CDA_PREFIX}.fc2.weight"), 1, hid, SUBDESCRIPTORS, ActivationKind::Spikes));
        NetworkGraph { layers, steps: t }
    }
}

/// The three sub-descriptors, their fusion weights and the global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub steps: usize,
    pub channels: usize,
    /// Row-major `(T, C)` each: shared, MCS-specific, TSS-specific.
    pub subs: [Vec<f64>; 3],
    pub weights: [f64; 3],
    /// Length `3C`; unit norm unless `degenerate`.
    pub descriptor: Vec<f64>,
    pub degenerate: bool,
}

impl DescriptorSet {
    pub fn degenerate(steps: usize, channels: usize) -> Self {
        let z = vec![0.0; steps * channels];
        Self {
            steps,
            channels,
            subs: [z.clone(), z.clone(), z],
            weights: [1.0 / 3.0; 3],
            descriptor: vec![0.0; SUBDESCRIPTORS * channels],
            degenerate: true,
        }
    }
}

/// Binary feature maps of the two streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMaps {
    pub mcs: SpikeTensor,
    pub tss: SpikeTensor,
}

/// Run both encoders (inference mode) on one sample.
pub fn bsr_encode(model: &Model, mcs: &SpikeTensor, tss: &SpikeTensor) -> Result<FeatureMaps> {
    let mut g = Graph::new(&model.store, Mode::EVAL);
    let (m, s) = model.stream_inputs(&mut g, mcs, tss)?;
    let (t, lif) = (model.config.steps, model.config.lif);
    let fm = model.mcs_net.forward(&mut g, m, t, lif)?;
    let fs = model.tss_net.forward(&mut g, s, t, lif)?;
    let to_spikes = |v: Var| {
        let x = g.value(v);
        let sh = x.shape();
        SpikeTensor::from_values([t, sh[1], sh[2], sh[3]], x.data())
    };
    Ok(FeatureMaps { mcs: to_spikes(fm)?, tss: to_spikes(fs)? })
}

/// Shared, MCS-specific and TSS-specific components.
pub fn ssd_extract(maps: &FeatureMaps) -> Result<[SpikeTensor; 3]> {
    let shared = maps.mcs.and(&maps.tss)?;
    Ok([shared, maps.mcs.and_not(&maps.tss)?, maps.tss.and_not(&maps.mcs)?])
}

/// Spatially average one binary `(T, C, H, W)` tensor and L2-normalize each
/// step's channel vector; all-zero rows stay zero. Row-major `(T, C)`.
pub fn pool_descriptor(x: &SpikeTensor) -> Vec<f64> {
    let [t, c, h, w] = x.dims();
    let hw = (h * w) as f64;
    let mut out = vec![0.0; t * c];
    for s in 0..t {
        for ch in 0..c {
            let mut n = 0usize;
            for y in 0..h {
                for xx in 0..w {
                    n += x.get(s, ch, y, xx) as usize;
                }
            }
            out[s * c + ch] = n as f64 / hw;
        }
        normalize_in_place(&mut out[s * c..][..c]);
    }
    out
}

pub fn pool_descriptors(x: &[SpikeTensor; 3]) -> [Vec<f64>; 3] {
    [pool_descriptor(&x[0]), pool_descriptor(&x[1]), pool_descriptor(&x[2])]
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn sub_inputs(g: &mut Graph<'_>, subs: &[Vec<f64>; 3], steps: usize, channels: usize) -> Result<[Var; 3]> {
    let mut vars = Vec::new();
    for d in subs {
        if d.len() != steps * channels {
            return Err(Error::Shape(format!("sub-descriptor of length {} is not {steps} x {channels}", d.len())));
        }
        vars.push(g.input(Tensor::from_vec(&[steps, channels], d.clone())?));
    }
    Ok([vars[0], vars[1], vars[2]])
}

/// Fusion weights for one sample's sub-descriptors (row-major `(T, C)`).
pub fn cda_weights(model: &Model, subs: &[Vec<f64>; 3]) -> Result<[f64; 3]> {
    let mut g = Graph::new(&model.store, Mode::EVAL);
    let (t, c) = (model.config.steps, model.cda.channels);
    let vars = sub_inputs(&mut g, subs, t, c)?;
    let w = model.cda.weights(&mut g, vars, t, model.config.lif)?;
    let w = g.value(w).data();
    Ok([w[0], w[1], w[2]])
}

/// Weighted aggregation into the global descriptor; returns it with a
/// degeneracy flag (all inputs zero).
pub fn cda_aggregate(subs: &[Vec<f64>; 3], weights: [f64; 3], steps: usize) -> Result<(Vec<f64>, bool)> {
    let channels = if steps == 0 { 0 } else { subs[0].len() / steps };
    if steps == 0 || channels == 0 {
        return Err(Error::Shape("empty sub-descriptors".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::EVAL);
    let vars = sub_inputs(&mut g, subs, steps, channels)?;
    let w = g.input(Tensor::from_vec(&[1, SUBDESCRIPTORS], weights.to_vec())?);
    let d = aggregate(&mut g, vars, w, steps)?;
    let d = g.value(d).data().to_vec();
    let degenerate = d.iter().all(|&v| v == 0.0);
    Ok((d, degenerate))
}

/// Descriptor of one volume: representations, both encoders, split, pooling
/// and fusion, deterministic in `(volume, model, seed)`.
pub fn full_descriptor(volume: &EventVolume, model: &Model, seed: u64) -> Result<DescriptorSet> {
    Ok(model.describe_volumes(&[volume], &[seed])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, Resolution};
    use crate::rng::Stream;

    fn small() -> ModelConfig {
        ModelConfig { scale: 0.125, ..ModelConfig::default() }
    }

    fn random_spikes(dims: [usize; 4], p: f64, rng: &mut Stream) -> SpikeTensor {
        let n = dims.iter().product::<usize>();
        let v: Vec<f64> = (0..n).map(|_| (rng.uniform() < p) as u8 as f64).collect();
        SpikeTensor::from_values(dims, &v).unwrap()
    }

    #[test]
    fn thirteen_conv_layers_and_widths() {
        let m = Model::skeleton(ModelConfig::default()).unwrap();
        assert_eq!(m.mcs_net.conv_layers(), 13);
        assert_eq!(m.config.channels(), 256);
        assert_eq!(small().widths(), [8, 16, 32]);
        assert_eq!(m.mcs_net.out_hw(64, 64), (4, 4));
    }

    #[test]
    fn zero_inputs_give_zero_maps() {
        let m = Model::new(small(), 1).unwrap();
        let z = SpikeTensor::zeros([4, 2, 32, 32]).unwrap();
        let f = bsr_encode(&m, &z, &z).unwrap();
        assert_eq!(f.mcs.dims(), [4, 32, 2, 2]);
        assert_eq!(f.mcs.count_ones() + f.tss.count_ones(), 0);
    }

    #[test]
    fn swapping_inputs_swaps_maps_with_tied_streams() {
        let mut m = Model::new(small(), 2).unwrap();
        for e in m.store.entries().to_vec() {
            if let Some(rest) = e.name.strip_prefix("mcs.") {
                m.store.assign(&format!("tss.{rest}"), e.value.clone()).unwrap();
            }
        }
        let mut rng = Stream::new(9);
        let a = random_spikes([4, 2, 32, 32], 0.3, &mut rng);
        let b = random_spikes([4, 2, 32, 32], 0.3, &mut rng);
        let ab = bsr_encode(&m, &a, &b).unwrap();
        let ba = bsr_encode(&m, &b, &a).unwrap();
        assert_eq!(ab.mcs, ba.tss);
        assert_eq!(ab.tss, ba.mcs);
    }

    #[test]
    fn ssd_truth_table() {
        let mk = |v: [f64; 4]| SpikeTensor::from_values([1, 1, 2, 2], &v).unwrap();
        let maps = FeatureMaps { mcs: mk([1.0, 1.0, 0.0, 0.0]), tss: mk([1.0, 0.0, 1.0, 0.0]) };
        let [x1, x2, x3] = ssd_extract(&maps).unwrap();
        assert_eq!(x1.to_values(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(x2.to_values(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(x3.to_values(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pooling_examples() {
        let ones = SpikeTensor::from_values([2, 4, 2, 2], &[1.0; 32]).unwrap();
        assert!(pool_descriptor(&ones).iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let zeros = SpikeTensor::zeros([2, 4, 2, 2]).unwrap();
        assert!(pool_descriptor(&zeros).iter().all(|&v| v == 0.0));
        let mut one_hot = SpikeTensor::zeros([2, 4, 2, 2]).unwrap();
        one_hot.set(0, 2, 1, 1, true);
        one_hot.set(1, 3, 0, 0, true);
        one_hot.set(1, 3, 0, 1, true);
        assert_eq!(pool_descriptor(&one_hot), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_subs_with_zero_biases_give_uniform_weights() {
        let mut m = Model::new(small(), 3).unwrap();
        m.store.assign("cda.fc1.bias", Tensor::zeros(&[64])).unwrap();
        m.store.assign("cda.fc2.bias", Tensor::zeros(&[3])).unwrap();
        let z = vec![0.0; 4 * 32];
        let w = cda_weights(&m, &[z.clone(), z.clone(), z]).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn weights_shift_invariant() {
        let mut m = Model::new(small(), 4).unwrap();
        let mut rng = Stream::new(4);
        let subs: [Vec<f64>; 3] = core::array::from_fn(|_| (0..128).map(|_| rng.uniform()).collect());
        let w0 = cda_weights(&m, &subs).unwrap();
        let b = m.store.value(m.store.id("cda.fc2.bias").unwrap()).data().iter().map(|v| v + 3.7).collect();
        m.store.assign("cda.fc2.bias", Tensor::from_vec(&[3], b).unwrap()).unwrap();
        let w1 = cda_weights(&m, &subs).unwrap();
        for i in 0..3 {
            assert!((w0[i] - w1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_with_one_hot_weight() {
        // T=2, C=2. Mean row of D1 = (0.5, 0.5) -> intra-norm (1/sqrt2, 1/sqrt2).
        let d1 = vec![1.0, 0.0, 0.0, 1.0];
        let d2 = vec![0.3, 0.4, 0.1, 0.0];
        let d3 = vec![0.0, 0.2, 0.5, 0.5];
        let (d, degenerate) = cda_aggregate(&[d1, d2, d3], [1.0, 0.0, 0.0], 2).unwrap();
        let r = 1.0 / 2f64.sqrt();
        let expect = [r, r, 0.0, 0.0, 0.0, 0.0];
        assert!(!degenerate);
        for (a, b) in d.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_scale_invariance_and_zero_guard() {
        let subs = [vec![0.2, 0.1, 0.4, 0.3], vec![0.0, 0.5, 0.1, 0.1], vec![0.9, 0.0, 0.0, 0.2]];
        let doubled = subs.clone().map(|v| v.iter().map(|x| 2.0 * x).collect());
        let w = [0.2, 0.5, 0.3];
        let (a, _) = cda_aggregate(&subs, w, 2).unwrap();
        let (b, _) = cda_aggregate(&doubled, w, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let norm: f64 = a.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        let z = vec![0.0; 4];
        let (d, degenerate) = cda_aggregate(&[z.clone(), z.clone(), z], w, 2).unwrap();
        assert!(degenerate && d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_determinism_and_empty_volume() {
        let m = Model::new(small(), 5).unwrap();
        let res = Resolution::new(32, 32);
        let mut rng = Stream::new(1);
        let mut evs: Vec<Event> = (0..300)
            .map(|_| Event::new(rng.below(250_000), rng.below(32) as u16, rng.below(32) as u16, if rng.below(2) == 0 { 1 } else { -1 }))
            .collect();
        evs.sort_by_key(|e| e.t);
        let v = EventVolume::new(evs, 0, 250_000, res, None).unwrap();
        let a = full_descriptor(&v, &m, 3).unwrap();
        assert_eq!(a, full_descriptor(&v, &m, 3).unwrap());
        assert!(a.degenerate || (a.descriptor.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        let empty = EventVolume::new(vec![], 0, 250_000, res, None).unwrap();
        let e = full_descriptor(&empty, &m, 3).unwrap();
        assert!(e.degenerate && e.descriptor.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batched_description_matches_single() {
        let m = Model::new(small(), 6).unwrap();
        let res = Resolution::new(32, 32);
        let mut rng = Stream::new(2);
        let vols: Vec<EventVolume> = (0..3)
            .map(|_| {
                let mut evs: Vec<Event> =
                    (0..200).map(|_| Event::new(rng.below(1000), rng.below(32) as u16, rng.below(32) as u16, 1)).collect();
                evs.sort_by_key(|e| e.t);
                EventVolume::new(evs, 0, 1000, res, None).unwrap()
            })
            .collect();
        let refs: Vec<&EventVolume> = vols.iter().collect();
        let batch = m.describe_volumes(&refs, &[1, 2, 3]).unwrap();
        for (i, v) in vols.iter().enumerate() {
            let single = full_descriptor(v, &m, i as u64 + 1).unwrap();
            for (a, b) in single.descriptor.iter().zip(&batch[i].descriptor) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_pieces_agree_with_graph_forward() {
        let m = Model::new(small(), 7).unwrap();
        let mut rng = Stream::new(3);
        let a = random_spikes([4, 2, 32, 32], 0.4, &mut rng);
        let b = random_spikes([4, 2, 32, 32], 0.4, &mut rng);
        let set = m.describe_tensors(&a, &b).unwrap();
        let maps = bsr_encode(&m, &a, &b).unwrap();
        let subs = pool_descriptors(&ssd_extract(&maps).unwrap());
        for (x, y) in subs.iter().flatten().zip(set.subs.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = cda_weights(&m, &subs).unwrap();
        let (d, _) = cda_aggregate(&subs, w, 4).unwrap();
        for (x, y) in d.iter().zip(&set.descriptor) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn network_graph_chains() {
        let m = Model::skeleton(ModelConfig::default()).unwrap();
        let g = m.network_graph(64, 64, Some(100));
        g.validate().unwrap();
        let convs = g.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. })).count();
        // 13 per stream plus two projections per stream.
        assert_eq!(convs, 30);
    }
}
