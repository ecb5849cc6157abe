//! Event volume -> spike tensor conversions.
//!
//! Two complementary representations with polarity channels (0 = ON,
//! 1 = OFF):
//!
//! * the multi-channel spike tensor, where a small spiking MLP maps each
//!   event's normalized timestamp to spikes over `T` steps, deposited at the
//!   event pixel and binarized by `count > 0`;
//! * the time-surface spike tensor, where an exponentially decayed
//!   most-recent-event map is Bernoulli-sampled independently at each step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::event::{Event, EventVolume, Resolution};
use crate::math;
use crate::rng::{self, label, Stream};
use crate::snn::{Graph, LifParams, Mode, ParamStore, ScatterEvent, Var};
use crate::tensor::{SpikeTensor, Tensor};

/// Default number of time steps.
pub const DEFAULT_STEPS: usize = 4;
/// Default SMLP hidden width.
pub const DEFAULT_SMLP_HIDDEN: usize = 32;
/// Default time-surface decay constant, seconds.
pub const DEFAULT_ETA_S: f64 = 0.05;

/// `(T-1)(t - t_1)/(t_last - t_1)`; a zero-length span maps everything to 0.
pub fn normalize_timestamp(t: u64, t_first: u64, t_last: u64, steps: usize) -> f64 {
    if t_last <= t_first || steps < 2 {
        return 0.0;
    }
    let span = (t_last - t_first) as f64;
    (steps - 1) as f64 * (t.saturating_sub(t_first)) as f64 / span
}

/// True when the volume cannot be placed on a time axis (no events or one instant).
pub fn is_degenerate(events: &[Event]) -> bool {
    match (events.first(), events.last()) {
        (Some(a), Some(b)) => a.t == b.t,
        _ => true,
    }
}

/// Normalized timestamps of a volume's events.
pub fn normalized_times(events: &[Event], steps: usize) -> Vec<f64> {
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Vec::new();
    };
    events.iter().map(|e| normalize_timestamp(e.t, first.t, last.t, steps)).collect()
}

/// Maps an event's normalized time to its spike contribution at each step.
pub trait TemporalKernel {
    fn respond(&self, t_star: f64, steps: usize) -> Vec<bool>;
}

/// Fires only at the step nearest to `t*` (ties round half away from zero).
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestStepKernel;

impl TemporalKernel for NearestStepKernel {
    fn respond(&self, t_star: f64, steps: usize) -> Vec<bool> {
        let k = math::round(t_star) as usize;
        (0..steps).map(|t| t == k).collect()
    }
}

/// Binary multi-channel spike tensor plus a degeneracy flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct McsTensor {
    pub tensor: SpikeTensor,
    /// Empty volume or all events at one instant.
    pub degenerate: bool,
}

/// Build the multi-channel spike tensor with an arbitrary temporal kernel.
pub fn build_mcs_tensor_with_kernel(volume: &EventVolume, kernel: &dyn TemporalKernel, steps: usize) -> Result<McsTensor> {
    let res = volume.resolution();
    let mut tensor = SpikeTensor::zeros([steps, 2, res.height as usize, res.width as usize])?;
    let events = volume.events();
    for (e, ts) in events.iter().zip(normalized_times(events, steps)) {
        let c = if e.is_positive() { 0 } else { 1 };
        let r = kernel.respond(ts, steps);
        if r.len() != steps {
            return Err(Error::Shape(format!("kernel returned {} steps, expected {steps}", r.len())));
        }
        for (t, fire) in r.into_iter().enumerate() {
            if fire {
                tensor.set(t, c, e.y as usize, e.x as usize, true);
            }
        }
    }
    Ok(McsTensor { tensor, degenerate: is_degenerate(events) })
}

/// Spiking MLP `1 -> hidden -> T` with a LIF layer after each linear layer.
///
/// For one event the offsets `t' - t*` at `t' = 0..T-1` form an input
/// sequence; the LIF layers integrate along it and the spike for step `t'`
/// is output unit `t'` at step `t'`. Parameters live in a [`ParamStore`]
/// under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmlpEncoder {
    pub prefix: alloc::string::String,
    pub hidden: usize,
    pub steps: usize,
    pub lif: LifParams,
}

impl SmlpEncoder {
    pub fn new(prefix: &str, hidden: usize, steps: usize, lif: LifParams) -> Self {
        Self { prefix: prefix.into(), hidden, steps, lif }
    }

    fn name(&self, part: &str) -> alloc::string::String {
        format!("{}.{part}", self.prefix)
    }

    /// Register parameters, initialized to the nearest-step kernel.
    ///
    /// Hidden unit `j` gets input `K_j (c_j - o) + θ`: it fires on every step
    /// while the offset `o <= c_j` and, once `o` passes `c_j`, never again.
    /// Half the units sit at `c ≈ +0.5`, half at `c ≈ -0.5`; each output unit
    /// takes their difference, so step `t'` fires when `|t' - t*| <= 0.5`.
    /// Jitter on thresholds, slopes and output weights breaks the symmetry.
    pub fn register(&self, store: &mut ParamStore, rng: &mut Stream) -> Result<()> {
        let m = self.hidden;
        let theta = self.lif.v_threshold;
        let upper = m.div_ceil(2);
        let mut w1 = Vec::with_capacity(m);
        let mut b1 = Vec::with_capacity(m);
        for j in 0..m {
            let c = if j < upper { 0.5 } else { -0.5 } + rng.range_f64(-0.05, 0.05);
            let k = theta * rng.range_f64(4.0, 6.0);
            w1.push(-k);
            b1.push(k * c + theta);
        }
        store.add(self.name("fc1.weight"), Tensor::from_vec(&[m, 1], w1)?, true)?;
        store.add(self.name("fc1.bias"), Tensor::from_vec(&[m], b1)?, true)?;
        let mut w2 = Vec::with_capacity(self.steps * m);
        for _ in 0..self.steps {
            for j in 0..m {
                let w = if j < upper { 2.0 * theta / upper as f64 } else { -2.0 * theta / (m - upper) as f64 };
                w2.push(w * (1.0 + rng.range_f64(-0.05, 0.05)));
            }
        }
        store.add(self.name("fc2.weight"), Tensor::from_vec(&[self.steps, m], w2)?, true)?;
        store.add(self.name("fc2.bias"), Tensor::filled(&[self.steps], 0.0), true)?;
        Ok(())
    }

    /// Encode offsets `[T*E, 1]` (row `t*E + e`) to spikes `[T*E, T]`.
    pub fn forward(&self, g: &mut Graph<'_>, offsets: Var) -> Result<Var> {
        let w1 = g.param_named(&self.name("fc1.weight"))?;
        let b1 = g.param_named(&self.name("fc1.bias"))?;
        let w2 = g.param_named(&self.name("fc2.weight"))?;
        let b2 = g.param_named(&self.name("fc2.bias"))?;
        let h = g.linear(offsets, w1, b1)?;
        let s = g.lif(h, self.steps, self.lif, &self.name("lif1"))?;
        let o = g.linear(s, w2, b2)?;
        g.lif(o, self.steps, self.lif, &self.name("lif2"))
    }

    /// Offsets tensor `[T*E, 1]` for normalized times `t_stars`.
    pub fn offsets(&self, t_stars: &[f64]) -> Tensor {
        let e = t_stars.len();
        let mut data = Vec::with_capacity(self.steps * e);
        for t in 0..self.steps {
            data.extend(t_stars.iter().map(|ts| t as f64 - ts));
        }
        Tensor::from_vec(&[self.steps * e, 1], data).expect("length matches")
    }

    /// Record the batched multi-channel spike tensor `[T*B, 2, H, W]` for `volumes`.
    pub fn mcs_input(&self, g: &mut Graph<'_>, volumes: &[&EventVolume]) -> Result<Var> {
        let res = common_resolution(volumes)?;
        let mut t_stars = Vec::new();
        let mut dest = Vec::new();
        for (b, v) in volumes.iter().enumerate() {
            for (e, ts) in v.events().iter().zip(normalized_times(v.events(), self.steps)) {
                t_stars.push(ts);
                dest.push(ScatterEvent { batch: b as u32, channel: if e.is_positive() { 0 } else { 1 }, y: e.y, x: e.x });
            }
        }
        let offsets = g.input(self.offsets(&t_stars));
        let enc = self.forward(g, offsets)?;
        g.scatter_spikes(enc, dest, self.steps, volumes.len(), (res.height as usize, res.width as usize))
    }
}

/// Resolution shared by all volumes of a batch.
pub fn common_resolution(volumes: &[&EventVolume]) -> Result<Resolution> {
    let Some(first) = volumes.first() else {
        return Err(Error::Shape("empty volume batch".into()));
    };
    let res = first.resolution();
    if volumes.iter().any(|v| v.resolution() != res) {
        return Err(Error::Shape("volumes in a batch must share one resolution".into()));
    }
    Ok(res)
}

/// An encoder bound to its parameters, usable as a [`TemporalKernel`].
pub struct BoundEncoder<'a> {
    pub encoder: &'a SmlpEncoder,
    pub store: &'a ParamStore,
}

impl TemporalKernel for BoundEncoder<'_> {
    fn respond(&self, t_star: f64, steps: usize) -> Vec<bool> {
        let mut g = Graph::new(self.store, Mode::EVAL);
        let x = g.input(self.encoder.offsets(&[t_star]));
        let Ok(y) = self.encoder.forward(&mut g, x) else {
            return vec![false; steps];
        };
        let out = g.value(y).data();
        (0..steps).map(|t| out.get(t * steps + t).copied().unwrap_or(0.0) > 0.0).collect()
    }
}

/// Multi-channel spike tensor using the spiking MLP encoder (inference mode).
pub fn build_mcs_tensor(volume: &EventVolume, encoder: &SmlpEncoder, store: &ParamStore) -> Result<McsTensor> {
    let steps = encoder.steps;
    let res = volume.resolution();
    let (h, w) = (res.height as usize, res.width as usize);
    let mut g = Graph::new(store, Mode::EVAL);
    let v = encoder.mcs_input(&mut g, &[volume])?;
    let tensor = SpikeTensor::from_values([steps, 2, h, w], g.value(v).data())?;
    Ok(McsTensor { tensor, degenerate: is_degenerate(volume.events()) })
}

/// Exponentially decayed time-since-last-event map, `[2, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl TsMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != 2 * height * width {
            return Err(Error::Shape(format!("time surface needs {} values", 2 * height * width)));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("time-surface values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Time surface of `events` at time `t_end` with decay constant `eta_s` seconds.
/// Pixels without a matching-polarity event stay 0.
pub fn ts_map_from_events(events: &[Event], res: Resolution, t_end: u64, eta_s: f64) -> Result<TsMap> {
    if !(eta_s > 0.0) || !eta_s.is_finite() {
        return Err(Error::Config(format!("decay constant must be positive, got {eta_s}")));
    }
    let (h, w) = (res.height as usize, res.width as usize);
    let mut last: Vec<Option<u64>> = vec![None; 2 * h * w];
    for e in events {
        let c = if e.is_positive() { 0 } else { 1 };
        let i = (c * h + e.y as usize) * w + e.x as usize;
        last[i] = Some(last[i].map_or(e.t, |p| p.max(e.t)));
    }
    let values = last
        .into_iter()
        .map(|l| match l {
            None => 0.0,
            Some(t) => {
                let elapsed_s = t_end.saturating_sub(t) as f64 * 1e-6;
                math::exp(-elapsed_s / eta_s)
            }
        })
        .collect();
    TsMap::from_values(h, w, values)
}

pub fn build_ts_map(volume: &EventVolume, eta_s: f64) -> Result<TsMap> {
    ts_map_from_events(volume.events(), volume.resolution(), volume.t_end(), eta_s)
}

/// Bernoulli-sample `steps` spike frames from a time surface. Each pixel and
/// channel draws from its own counter-based stream keyed by `(seed, c, y, x)`.
pub fn sample_tss_tensor(map: &TsMap, steps: usize, seed: u64) -> Result<SpikeTensor> {
    let (h, w) = map.dims();
    let mut out = SpikeTensor::zeros([steps, 2, h, w])?;
    let tag = label("repr.tss");
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let p = map.get(c, y, x);
                if p <= 0.0 {
                    continue;
                }
                let key = rng::derive_key(seed, &[tag, c as u64, y as u64, x as u64]);
                for t in 0..steps {
                    if rng::unit_f64(rng::at(key, t as u64)) < p {
                        out.set(t, c, y, x, true);
                    }
                }
            }
        }
    }
    Ok(out)
}
