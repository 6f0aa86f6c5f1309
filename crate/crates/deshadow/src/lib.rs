//! Generative portrait shadow removal, end to end at desk scale: procedural
//! OLAT data construction, environment-map relighting, geometric shadow
//! simulation, a conditional denoising-diffusion model trained with a
//! two-stage compositional recipe, guided refinement, and an evaluation
//! harness.

pub mod diffusion;
pub mod envmap;
pub mod error;
pub mod guidedup;
pub mod image;
pub mod metrics;
pub mod io;
pub mod nn;
pub mod olat;
pub mod shadowsim;

pub use error::{Error, Result};
pub use image::Image;
