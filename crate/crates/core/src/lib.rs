//! Single-projection volumetric reconstruction with simultaneous tumor
//! segmentation.
//!
//! The crate is `no_std` (with `alloc`) when built without the `std`
//! feature. The default `parallel` feature pulls in `std` and lets the heavy
//! kernels (convolutions, ray marching, warping) spread over a rayon pool;
//! results are bit-identical either way because every output element is
//! reduced by exactly one worker in a fixed order.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod grid;
pub mod metrics;
pub mod motion;
pub mod network;
pub mod phantom;
pub mod projector;
pub mod resample;
pub mod sample;
pub mod tensor;
pub mod training;

mod par;

pub use error::{Error, Result};
pub use grid::{Grid, Mask, Volume};
pub use tensor::{ParamStore, Scalar, Tape, Tensor, Var};
