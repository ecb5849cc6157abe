//! Differentiable spiking-network engine: LIF neurons, conv/BN/pool/FC
//! layers, spike-element-wise residual blocks and BPTT.

pub mod graph;
pub mod layers;
pub mod lif;
pub mod params;

pub use graph::{Backward, BnUpdate, ConvGeom, Graph, Mode, ScatterEvent, Var};
pub use layers::{ActivationKind, ConvBn, LayerKind, LayerSpec, NetworkGraph, SewBlock};
pub use lif::{LifLayerState, LifParams};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Run the reverse pass for `output` seeded with `grad`, rejecting any
/// non-finite parameter gradient with the offending parameter's name.
pub fn bptt_step(graph: Graph<'_>, output: Var, grad: Tensor) -> Result<Backward> {
    let store = graph.store();
    let out = graph.backward(output, grad)?;
    if let Some(name) = out.params.first_non_finite(store) {
        return Err(Error::NonFinite(alloc::format!("gradient of {name}")));
    }
    Ok(out)
}

/// Fold batch-norm running statistics into running buffers with `momentum`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.value_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.value_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}
