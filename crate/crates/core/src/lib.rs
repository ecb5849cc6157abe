//! Spiking-neural-network place recognition for event cameras.
//!
//! The crate is `no_std` (with `alloc`) and contains the whole numerical
//! pipeline: event slicing and synthesis, the two spike representations
//! (learned multi-channel spike tensor and Bernoulli-sampled time surface),
//! a small reverse-mode engine for LIF networks, the dual-stream residual
//! descriptor network, triplet training, retrieval metrics and operation
//! counting for energy estimates. File formats and the command-line driver
//! live in the `evsnn` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod descriptor;
pub mod energy;
pub mod error;
pub mod eval;
pub mod event;
pub mod math;
pub mod repr;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{SpikeTensor, Tensor};
