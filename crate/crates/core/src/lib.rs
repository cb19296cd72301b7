//! Diffusion tensor estimation from diffusion-weighted MRI.
//!
//! The crate covers the classical log-linear estimators (LLS, WLLS, iterated
//! WLLS) and a model-based unrolled ADMM solver that couples the weighted
//! least-squares data term with a learned (or fixed) image denoiser acting on
//! the tensor field, in the spirit of regularization-by-denoising
//! (Romano et al., SIAM J. Imaging Sci. 2017) and plug-and-play ADMM
//! (Chan et al., IEEE TCI 2017).
//!
//! Everything operates on dense 3-D volumes with a channel-fastest memory
//! layout. Physical units follow the MRI convention: b in s/mm^2,
//! diffusivities in mm^2/s.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) enables nothing beyond the standard library's math intrinsics,
//! and `rayon` (default, implies `std`) parallelizes the per-voxel hot loops.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub(crate) mod fmath;

pub mod denoiser;
pub mod dti;
pub mod estimators;
pub mod linalg;
pub mod metrics;
pub mod sim;
pub mod train;
pub mod unroll;
pub mod volume;

pub use dti::{DwiStack, GradientEntry, GradientScheme, ParamField, ParamVector, ScalarMaps};
pub use volume::{Field, Mask, Volume};
