//! Semi-supervised GAN laboratory: dense tensors with reverse-mode
//! differentiation, DCGAN-style networks with a K+1-class discriminator,
//! the semi-supervised and vanilla training algorithms, dataset
//! preparation, and rank-based (CMC / Top-r) evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::RandomSource;
pub use tensor::{Real, Tensor};
