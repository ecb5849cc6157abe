//! Leaky integrate-and-fire dynamics with an arctan surrogate gradient.
//!
//! Recurrence per neuron, hard reset to zero:
//!
//! ```text
//! h_t = decay * h_{t-1} * (1 - s_{t-1}) + I_t
//! s_t = H(h_t - v_threshold)
//! ```
//!
//! The backward pass replaces `H'` with `α / (2 (1 + (π α x / 2)^2))`, the
//! derivative of `1/2 + atan(π α x / 2) / π`. In smooth mode that primitive
//! is also used in the forward pass, which makes the network differentiable
//! and lets finite differences check the analytic gradients.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math;

/// Neuron hyperparameters shared by a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub v_threshold: f64,
    /// Membrane leak factor per step, in `[0, 1)`.
    pub decay: f64,
    /// Surrogate sharpness.
    pub alpha: f64,
    /// Treat the `(1 - s_{t-1})` reset gate as a constant in backward.
    pub detach_reset: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { v_threshold: 1.0, decay: 0.5, alpha: 2.0, detach_reset: true }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_threshold > 0.0) {
            return Err(Error::Config("v_threshold must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("decay must lie in [0, 1)".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("surrogate alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Surrogate derivative at `u_c = u - v_threshold`.
#[inline]
pub fn surrogate_grad(alpha: f64, u_c: f64) -> f64 {
    let z = PI * alpha * u_c / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

/// Smooth spike function whose derivative is [`surrogate_grad`].
#[inline]
pub fn smooth_spike(alpha: f64, u_c: f64) -> f64 {
    0.5 + math::atan(PI * alpha * u_c / 2.0) / PI
}

#[inline]
fn fire(params: &LifParams, h: f64, smooth: bool) -> f64 {
    let u_c = h - params.v_threshold;
    if smooth {
        smooth_spike(params.alpha, u_c)
    } else if u_c >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Run `steps` time steps over a t-major `[steps, n]` input.
/// Fills the pre-reset membrane `h` and spikes `s` (same layout).
pub fn forward_sequence(params: &LifParams, input: &[f64], steps: usize, smooth: bool, h: &mut [f64], s: &mut [f64]) {
    let n = input.len() / steps;
    debug_assert_eq!(n * steps, input.len());
    for j in 0..n {
        let mut u = 0.0;
        for t in 0..steps {
            let i = t * n + j;
            let ht = params.decay * u + input[i];
            let st = fire(params, ht, smooth);
            h[i] = ht;
            s[i] = st;
            u = ht * (1.0 - st);
        }
    }
}

/// Backpropagate spike gradients through the recurrence (BPTT).
pub fn backward_sequence(params: &LifParams, h: &[f64], s: &[f64], grad_s: &[f64], steps: usize) -> Vec<f64> {
    let n = h.len() / steps;
    let mut grad_in = vec![0.0; h.len()];
    for j in 0..n {
        // gradient w.r.t. h_{t+1}
        let mut gh_next = 0.0;
        for t in (0..steps).rev() {
            let i = t * n + j;
            let sg = surrogate_grad(params.alpha, h[i] - params.v_threshold);
            let mut du_dh = 1.0 - s[i];
            if !params.detach_reset {
                du_dh -= h[i] * sg;
            }
            let gh = grad_s[i] * sg + params.decay * gh_next * du_dh;
            grad_in[i] = gh;
            gh_next = gh;
        }
    }
    grad_in
}

/// Stateful single-layer LIF, stepped one time step at a time, recording
/// what the backward pass needs.
#[derive(Clone, Debug)]
pub struct LifLayerState {
    params: LifParams,
    u: Vec<f64>,
    h_hist: Vec<f64>,
    s_hist: Vec<f64>,
    steps: usize,
}

impl LifLayerState {
    pub fn new(neurons: usize, params: LifParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, u: vec![0.0; neurons], h_hist: Vec::new(), s_hist: Vec::new(), steps: 0 })
    }

    /// Membrane potential after the most recent step (post reset).
    pub fn membrane(&self) -> &[f64] {
        &self.u
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Advance one step with input current `current`; returns binary spikes.
    pub fn step(&mut self, current: &[f64]) -> Result<Vec<u8>> {
        if current.len() != self.u.len() {
            return Err(Error::Shape(alloc::format!("LIF layer has {} neurons, got {}", self.u.len(), current.len())));
        }
        if let Some(i) = current.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("LIF input current at neuron {i}")));
        }
        let mut spikes = Vec::with_capacity(current.len());
        for (u, &i_t) in self.u.iter_mut().zip(current) {
            let h = self.params.decay * *u + i_t;
            let s = fire(&self.params, h, false);
            self.h_hist.push(h);
            self.s_hist.push(s);
            *u = h * (1.0 - s);
            spikes.push(s as u8);
        }
        self.steps += 1;
        Ok(spikes)
    }

    /// Gradient w.r.t. every recorded input current, given per-step spike gradients.
    pub fn backward(&self, grad_spikes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.steps == 0 {
            return Err(Error::InvalidInput("LIF backward called without a recorded forward".into()));
        }
        if grad_spikes.len() != self.steps || grad_spikes.iter().any(|g| g.len() != self.u.len()) {
            return Err(Error::Shape("upstream gradient must be [steps][neurons]".into()));
        }
        let flat: Vec<f64> = grad_spikes.iter().flatten().copied().collect();
        let g = backward_sequence(&self.params, &self.h_hist, &self.s_hist, &flat, self.steps);
        Ok(g.chunks(self.u.len()).map(|c| c.to_vec()).collect())
    }
}
