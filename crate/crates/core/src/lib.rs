//! Reference-conditioned human insertion into scene images with latent
//! diffusion, guided by the depth of a posed 3D body model.

pub mod backends;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod pipelines;
pub mod render;
pub mod seeds;
pub mod synthetic;

pub use error::{Error, Result};
