//! Reverse-mode tape for spiking networks.
//!
//! A [`Graph`] records every forward operation together with whatever the
//! reverse pass needs. Time is folded into the leading axis: convolution,
//! batch-norm and pooling see `[T*B, C, H, W]` with row `t*B + b`, while LIF
//! nodes integrate over the `T` blocks of that axis. [`Graph::backward`]
//! consumes the tape once and returns gradients for every parameter it
//! touched.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::lif::{self, LifParams};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward behaviour switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Mode {
    /// Batch-norm uses batch statistics and reports running-stat updates.
    pub train: bool,
    /// LIF nodes emit the smooth surrogate primitive instead of hard spikes.
    pub smooth: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, smooth: false };
    pub const TRAIN: Mode = Mode { train: true, smooth: false };
}

/// Batch statistics gathered by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Lif { x: Var, steps: usize, params: LifParams, h: Vec<f64>, name: String },
    MaxPool { x: Var, argmax: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SpatialMean { x: Var },
    Linear { x: Var, w: Var, b: Var },
    RowL2Norm { x: Var, norms: Vec<f64> },
    MeanTime { x: Var, steps: usize },
    Softmax { x: Var },
    ScaleByColumn { x: Var, w: Var, col: usize },
    ConcatColumns { parts: Vec<Var> },
    ScatterSpikes { enc: Var, events: Vec<ScatterEvent>, steps: usize },
}

/// One event's destination in a [`Graph::scatter_spikes`] output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScatterEvent {
    pub batch: u32,
    pub channel: u8,
    pub y: u16,
    pub x: u16,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

/// Output of [`Graph::backward`].
#[derive(Debug)]
pub struct Backward {
    pub params: Gradients,
    /// Gradients of leaves created with [`Graph::leaf`].
    pub leaves: Vec<(Var, Tensor)>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Read-only view of a convolution or linear node, for operation counting.
pub struct SynapticNode<'a> {
    pub weight: &'a str,
    pub input: &'a Tensor,
    pub output_shape: &'a [usize],
    pub weight_shape: &'a [usize],
    /// `Some` for convolutions.
    pub geom: Option<ConvGeom>,
}

fn conv_out(len: usize, k: usize, g: ConvGeom) -> Option<usize> {
    (len + 2 * g.pad).checked_sub(k).map(|v| v / g.stride + 1)
}

/// Output indices `o` with `0 <= o*stride + k - pad < in_len`, as `[lo, hi)`.
#[inline]
fn valid_range(k: usize, g: ConvGeom, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if g.pad > k { (g.pad - k).div_ceil(g.stride) } else { 0 };
    let hi = if in_len + g.pad > k { ((in_len + g.pad - k - 1) / g.stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Self { store, mode, nodes: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported in [`Backward::leaves`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let e = self.store.get(id);
        self.push(e.value.clone(), Op::Param(id), e.trainable)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.expect_id(name)?;
        Ok(self.param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || geom.stride == 0 {
            return Err(shape_err(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let (Some(ho), Some(wo)) = (conv_out(h, k, geom), conv_out(wd, k, geom)) else {
            return Err(shape_err(format!("conv2d kernel {k} larger than padded input {h}x{wd}")));
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                let plane = &mut out[(b * co + o) * ho * wo..][..ho * wo];
                for c in 0..ci {
                    let xin = &xv[(b * ci + c) * h * wd..][..h * wd];
                    for kh in 0..k {
                        let (oh_lo, oh_hi) = valid_range(kh, geom, h, ho);
                        for kw in 0..k {
                            let wgt = wv[((o * ci + c) * k + kh) * k + kw];
                            if wgt == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = valid_range(kw, geom, wd, wo);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * geom.stride + kh - geom.pad;
                                let row = &xin[ih * wd..][..wd];
                                let orow = &mut plane[oh * wo..][..wo];
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wgt * row[ow * geom.stride + kw - geom.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_vec(&[n, co, ho, wo], out)?, Op::Conv2d { x, w, geom }, rg))
    }

    /// Batch-norm over channel axis 1. `running` names the running mean/var buffers.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (ParamId, ParamId)) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm needs [N, C, ...]"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch_norm affine params must have {c} channels")));
        }
        let m = (n * inner) as f64;
        let train = self.mode.train;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for b in 0..n {
                for ch in 0..c {
                    let s: f64 = xv[(b * c + ch) * inner..][..inner].iter().sum();
                    mean[ch] += s;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..n {
                for ch in 0..c {
                    let mu = mean[ch];
                    let s: f64 = xv[(b * c + ch) * inner..][..inner].iter().map(|v| (v - mu) * (v - mu)).sum();
                    var[ch] += s;
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        } else {
            mean.copy_from_slice(self.store.value(running.0).data());
            var.copy_from_slice(self.store.value(running.1).data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if train {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                running_mean: running.0,
                running_var: running.1,
                batch_mean: mean,
                batch_var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::from_vec(&xs, out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    /// LIF layer over `steps` time blocks of axis 0.
    pub fn lif(&mut self, x: Var, steps: usize, params: LifParams, name: &str) -> Result<Var> {
        let xt = self.value(x);
        if steps == 0 || xt.shape().is_empty() || xt.shape()[0] % steps != 0 {
            return Err(shape_err(format!("LIF {name}: axis 0 of {:?} not divisible by T={steps}", xt.shape())));
        }
        if !xt.all_finite() {
            return Err(Error::NonFinite(format!("input current of {name}")));
        }
        let mut h = vec![0.0; xt.len()];
        let mut s = vec![0.0; xt.len()];
        lif::forward_sequence(&params, xt.data(), steps, self.mode.smooth, &mut h, &mut s);
        let shape = xt.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, s)?, Op::Lif { x, steps, params, h, name: name.into() }, rg))
    }

    /// Max-pool 3x3, stride 2, padding 1.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (k, geom) = (3, ConvGeom { stride: 2, pad: 1 });
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(shape_err("max_pool needs [N, C, H, W]"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(ho), Some(wo)) = (conv_out(h, k, geom), conv_out(w, k, geom)) else {
            return Err(shape_err("max_pool input too small"));
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kh in 0..k {
                        let ih = (oh * geom.stride + kh) as isize - geom.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * geom.stride + kw) as isize - geom.pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = (p * h + ih as usize) * w + iw as usize;
                            if xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * ho + oh) * wo + ow;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[n, c, ho, wo], out)?, Op::MaxPool { x, argmax }, rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("element-wise {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Global average pooling: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(shape_err("spatial_mean needs [N, C, H, W]"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = self.value(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[n, c], out)?, Op::SpatialMean { x }, rg))
    }

    /// `x [R, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(shape_err(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let (r, din, dout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; r * dout];
        for i in 0..r {
            let row = &xv[i * din..][..din];
            for o in 0..dout {
                let wr = &wv[o * din..][..din];
                out[i * dout + o] = bv[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[r, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// L2-normalize each row of `[R, D]`; all-zero rows stay zero.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 2 {
            return Err(shape_err("row_l2_norm needs [R, D]"));
        }
        let d = xs[1];
        let shape = xs.to_vec();
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(shape[0]);
        for row in out.chunks_mut(d.max(1)) {
            let nrm = math::sqrt(row.iter().map(|v| v * v).sum());
            if nrm > 0.0 {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
            norms.push(nrm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::RowL2Norm { x, norms }, rg))
    }

    /// Average over the `steps` time blocks: `[T*B, D] -> [B, D]`.
    pub fn mean_time(&mut self, x: Var, steps: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 2 || steps == 0 || xs[0] % steps != 0 {
            return Err(shape_err(format!("mean_time on {xs:?} with T={steps}")));
        }
        let (b, d) = (xs[0] / steps, xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * d];
        for t in 0..steps {
            for (o, v) in out.iter_mut().zip(&xv[t * b * d..][..b * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= steps as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, d], out)?, Op::MeanTime { x, steps }, rg))
    }

    /// Row-wise softmax of `[B, K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 2 {
            return Err(shape_err("softmax needs [B, K]"));
        }
        let (shape, k) = (xs.to_vec(), xs[1]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = math::exp(*v - mx));
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { x }, rg))
    }

    /// Multiply row `b` of `x [B, C]` by `w[b, col]`.
    pub fn scale_by_column(&mut self, x: Var, w: Var, col: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[0] != ws[0] || col >= ws[1] {
            return Err(shape_err(format!("scale_by_column {xs:?} by {ws:?}[{col}]")));
        }
        let (shape, c, k) = (xs.to_vec(), xs[1], ws[1]);
        let wv = self.value(w).data();
        let out = self.value(x).data().chunks(c).enumerate().flat_map(|(b, row)| row.iter().map(move |v| v * wv[b * k + col])).collect();
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::ScaleByColumn { x, w, col }, rg))
    }

    /// Concatenate `[B, C_i]` tensors along columns.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat of nothing"));
        };
        let b = self.value(first).shape()[0];
        let mut widths = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != b {
                return Err(shape_err(format!("concat_columns part {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for r in 0..b {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..][..w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&[b, total], out)?, Op::ConcatColumns { parts: parts.to_vec() }, rg))
    }

    /// Deposit per-event temporal codes into a binary `[T*B, 2, H, W]` tensor.
    ///
    /// `enc` is `[T*E, T]` (row `t*E + e`); event `e` contributes
    /// `enc[t*E + e, t]` at step `t`. Contributions are summed per cell and
    /// binarized by `count > 0`; the backward pass is straight-through.
    pub fn scatter_spikes(&mut self, enc: Var, events: Vec<ScatterEvent>, steps: usize, batch: usize, hw: (usize, usize)) -> Result<Var> {
        let es = self.value(enc).shape();
        let e = events.len();
        if es.len() != 2 || es[0] != steps * e || es[1] != steps {
            return Err(shape_err(format!("scatter_spikes encoder output {es:?} for {e} events, T={steps}")));
        }
        let (h, w) = hw;
        let mut counts = vec![0.0; steps * batch * 2 * h * w];
        let ev = self.value(enc).data();
        for t in 0..steps {
            for (i, d) in events.iter().enumerate() {
                if d.batch as usize >= batch || d.channel > 1 || d.y as usize >= h || d.x as usize >= w {
                    return Err(shape_err("scatter event outside output tensor"));
                }
                let v = ev[(t * e + i) * steps + t];
                let cell = (((t * batch + d.batch as usize) * 2 + d.channel as usize) * h + d.y as usize) * w + d.x as usize;
                counts[cell] += v;
            }
        }
        counts.iter_mut().for_each(|c| *c = if *c > 0.0 { 1.0 } else { 0.0 });
        let rg = self.rg(enc);
        Ok(self.push(Tensor::from_vec(&[steps * batch, 2, h, w], counts)?, Op::ScatterSpikes { enc, events, steps }, rg))
    }

    /// Convolution and linear nodes in forward order.
    pub fn synaptic_nodes(&self) -> Vec<SynapticNode<'_>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (x, w, geom) = match node.op {
                Op::Conv2d { x, w, geom } => (x, w, Some(geom)),
                Op::Linear { x, w, .. } => (x, w, None),
                _ => continue,
            };
            let Op::Param(id) = self.nodes[w.0].op else { continue };
            out.push(SynapticNode {
                weight: &self.store.get(id).name,
                input: &self.nodes[x.0].value,
                output_shape: node.value.shape(),
                weight_shape: self.nodes[w.0].value.shape(),
                geom,
            });
        }
        out
    }

    /// `(name, spikes)` of every LIF node in forward order.
    pub fn lif_outputs(&self) -> Vec<(&str, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Lif { name, .. } => Some((name.as_str(), &n.value)),
                _ => None,
            })
            .collect()
    }

    /// Reverse pass seeded with `grad` at `output`.
    pub fn backward(self, output: Var, grad: Tensor) -> Result<Backward> {
        if grad.shape() != self.value(output).shape() {
            return Err(shape_err(format!(
                "seed gradient {:?} for output {:?}",
                grad.shape(),
                self.value(output).shape()
            )));
        }
        let Graph { store, nodes, bn_updates, mode, .. } = self;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(grad);
        let mut params = Gradients::new(store.len());
        let mut leaves = Vec::new();

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let gd = g.data();
            match &node.op {
                Op::Input => leaves.push((Var(idx), g)),
                Op::Param(id) => params.accumulate(*id, g),
                Op::Conv2d { x, w, geom } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (xs, ws) = (xt.shape(), wt.shape());
                    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (co, k) = (ws[0], ws[2]);
                    let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                    let need_x = nodes[x.0].requires_grad;
                    let need_w = nodes[w.0].requires_grad;
                    let mut gx = if need_x { vec![0.0; xt.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
                    let (xv, wv) = (xt.data(), wt.data());
                    for b in 0..n {
                        for o in 0..co {
                            let gplane = &gd[(b * co + o) * ho * wo..][..ho * wo];
                            for c in 0..ci {
                                let xoff = (b * ci + c) * h * wd;
                                for kh in 0..k {
                                    let (oh_lo, oh_hi) = valid_range(kh, *geom, h, ho);
                                    for kw in 0..k {
                                        let (ow_lo, ow_hi) = valid_range(kw, *geom, wd, wo);
                                        let widx = ((o * ci + c) * k + kh) * k + kw;
                                        let wgt = wv[widx];
                                        let mut gw_acc = 0.0;
                                        for oh in oh_lo..oh_hi {
                                            let ih = oh * geom.stride + kh - geom.pad;
                                            let grow = &gplane[oh * wo..][..wo];
                                            let base = xoff + ih * wd + kw;
                                            for ow in ow_lo..ow_hi {
                                                let xi = base + ow * geom.stride - geom.pad;
                                                let gv = grow[ow];
                                                if need_w {
                                                    gw_acc += gv * xv[xi];
                                                }
                                                if need_x {
                                                    gx[xi] += gv * wgt;
                                                }
                                            }
                                        }
                                        if need_w {
                                            gw[widx] += gw_acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        acc(&mut grads, &nodes, *x, Tensor::from_vec(xs, gx)?);
                    }
                    if need_w {
                        acc(&mut grads, &nodes, *w, Tensor::from_vec(ws, gw)?);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let gam = nodes[gamma.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in base..base + inner {
                                dgamma[ch] += gd[i] * xhat[i];
                                dbeta[ch] += gd[i];
                            }
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let m = (n * inner) as f64;
                        let mut gx = vec![0.0; gd.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * inner;
                                for i in base..base + inner {
                                    gx[i] = if *train {
                                        // dxhat = g*gamma; sums of dxhat and dxhat*xhat are gamma*dbeta, gamma*dgamma
                                        gam[ch] * inv_std[ch] / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        gd[i] * gam[ch] * inv_std[ch]
                                    };
                                }
                            }
                        }
                        acc(&mut grads, &nodes, *x, Tensor::from_vec(xs, gx)?);
                    }
                    acc(&mut grads, &nodes, *gamma, Tensor::from_vec(&[c], dgamma)?);
                    acc(&mut grads, &nodes, *beta, Tensor::from_vec(&[c], dbeta)?);
                }
                Op::Lif { x, steps, params: p, h, .. } => {
                    let gx = lif::backward_sequence(p, h, node.value.data(), gd, *steps);
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(node.value.shape(), gx)?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; nodes[x.0].value.len()];
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += gd[o];
                    }
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(nodes[x.0].value.shape(), gx)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::from_vec(g.shape(), gd.iter().map(|v| -v).collect())?;
                    acc(&mut grads, &nodes, *a, g);
                    acc(&mut grads, &nodes, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let ga = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(g.shape(), ga)?);
                    acc(&mut grads, &nodes, *b, Tensor::from_vec(g.shape(), gb)?);
                }
                Op::SpatialMean { x } => {
                    let xs = nodes[x.0].value.shape();
                    let hw = xs[2] * xs[3];
                    let gx = gd.iter().flat_map(|&v| core::iter::repeat_n(v / hw as f64, hw)).collect();
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(xs, gx)?);
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (r, din) = (xt.shape()[0], xt.shape()[1]);
                    let dout = wt.shape()[0];
                    let (xv, wv) = (xt.data(), wt.data());
                    if nodes[x.0].requires_grad {
                        let mut gx = vec![0.0; r * din];
                        for i in 0..r {
                            for o in 0..dout {
                                let gv = gd[i * dout + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (gxi, wi) in gx[i * din..][..din].iter_mut().zip(&wv[o * din..][..din]) {
                                    *gxi += gv * wi;
                                }
                            }
                        }
                        acc(&mut grads, &nodes, *x, Tensor::from_vec(xt.shape(), gx)?);
                    }
                    let mut gw = vec![0.0; dout * din];
                    let mut gb = vec![0.0; dout];
                    for i in 0..r {
                        for o in 0..dout {
                            let gv = gd[i * dout + o];
                            gb[o] += gv;
                            if gv == 0.0 {
                                continue;
                            }
                            for (gwi, xi) in gw[o * din..][..din].iter_mut().zip(&xv[i * din..][..din]) {
                                *gwi += gv * xi;
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *w, Tensor::from_vec(wt.shape(), gw)?);
                    acc(&mut grads, &nodes, *b, Tensor::from_vec(&[dout], gb)?);
                }
                Op::RowL2Norm { x, norms } => {
                    let d = node.value.shape()[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; gd.len()];
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (&y[r * d..][..d], &gd[r * d..][..d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = (gr[j] - yr[j] * dot) / nrm;
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(node.value.shape(), gx)?);
                }
                Op::MeanTime { x, steps } => {
                    let gx: Vec<f64> = (0..*steps).flat_map(|_| gd.iter().map(|v| v / *steps as f64)).collect();
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(nodes[x.0].value.shape(), gx)?);
                }
                Op::Softmax { x } => {
                    let k = node.value.shape()[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; gd.len()];
                    for r in 0..y.len() / k {
                        let (yr, gr) = (&y[r * k..][..k], &gd[r * k..][..k]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gx[r * k + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(node.value.shape(), gx)?);
                }
                Op::ScaleByColumn { x, w, col } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (c, k) = (xt.shape()[1], wt.shape()[1]);
                    let (xv, wv) = (xt.data(), wt.data());
                    let mut gx = vec![0.0; gd.len()];
                    let mut gw = vec![0.0; wt.len()];
                    for b in 0..xt.shape()[0] {
                        let wb = wv[b * k + col];
                        for j in 0..c {
                            gx[b * c + j] = gd[b * c + j] * wb;
                            gw[b * k + col] += gd[b * c + j] * xv[b * c + j];
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::from_vec(xt.shape(), gx)?);
                    acc(&mut grads, &nodes, *w, Tensor::from_vec(wt.shape(), gw)?);
                }
                Op::ConcatColumns { parts } => {
                    let total = node.value.shape()[1];
                    let b = node.value.shape()[0];
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        let mut gp = Vec::with_capacity(b * w);
                        for r in 0..b {
                            gp.extend_from_slice(&gd[r * total + off..][..w]);
                        }
                        acc(&mut grads, &nodes, p, Tensor::from_vec(&[b, w], gp)?);
                        off += w;
                    }
                }
                Op::ScatterSpikes { enc, events, steps } => {
                    let s = node.value.shape();
                    let (batch, h, w) = (s[0] / steps, s[2], s[3]);
                    let e = events.len();
                    let mut ge = vec![0.0; nodes[enc.0].value.len()];
                    for t in 0..*steps {
                        for (i, d) in events.iter().enumerate() {
                            let cell = (((t * batch + d.batch as usize) * 2 + d.channel as usize) * h + d.y as usize) * w + d.x as usize;
                            ge[(t * e + i) * steps + t] = gd[cell];
                        }
                    }
                    acc(&mut grads, &nodes, *enc, Tensor::from_vec(nodes[enc.0].value.shape(), ge)?);
                }
            }
        }
        let _ = mode;
        Ok(Backward { params, leaves, bn_updates })
    }
}
