pub mod bridge;
pub mod diffusion;
pub mod error;
pub mod feynman_kac;
pub mod generator_lab;
pub mod grid;
pub mod h_transform;
pub mod hjb;
pub mod markov;
pub mod orlicz;
pub mod rng;

pub use error::{Error, Result};
