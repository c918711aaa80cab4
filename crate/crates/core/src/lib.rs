//! Self-supervised video denoising with a spatiotemporal blind-spot network.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! in-memory tensors. File formats, the CLI and other IO live in the `stbn`
//! companion crate.
//!
//! Pipeline, per clip:
//!
//! 1. [`flow`] estimates dense backward flow between neighbouring noisy frames.
//! 2. [`propagation`] runs two recurrent passes of [`blindspot::BsaBlock`],
//!    aligning the previous hidden state with nearest-neighbour [`warp`]s.
//! 3. [`srfe`] fuses both directions on a patch-unshuffled grid and projects
//!    to a per-pixel prediction that never sees the co-located noisy pixel.
//! 4. [`train`] fits the network against the noisy frames themselves.
#![cfg_attr(not(feature = "std"), no_std)]
#![cfg_attr(feature = "std", allow(unused_extern_crates))]

extern crate alloc;

pub mod blindspot;
pub mod error;
pub mod flow;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod propagation;
pub mod srfe;
pub mod tensor;
pub mod train;
pub mod videodata;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
