//! Autoregressive-transformer encoder jointly trained with a rectified-flow
//! diffusion decoder over continuous image latents.
//!
//! Layering, bottom-up:
//! - [`tensor`], [`autograd`], [`rng`], [`gradcheck`]: numeric core
//! - [`nn`]: attention, block masks, patching, transformer layers
//! - [`flow`]: rectified-flow path, targets and loss
//! - [`sampler`]: Euler ODE / scaled Euler–Maruyama integration and guidance
//! - [`model`]: input assembly, encoder, decoder, joint loss, inference
//! - [`analysis`]: diversity metric, condition fusion, distribution metrics

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use autograd::{concat_rows, BoundParams, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::{Element, Precision, Tensor};
