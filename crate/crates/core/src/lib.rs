#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod color;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
