//! Text-feature linear extrapolation for augmenting text-to-image training
//! data, plus a toy recurrent-affine diffusion model over embedding vectors.

pub mod corpus;
pub mod denoiser;
pub mod detect;
pub mod diffusion;
pub mod error;
pub mod evaluate;
pub mod extrapolate;
pub mod pipeline;
pub mod rng;
pub mod sample;
pub mod training;

pub use error::{Error, Result};
