//! Self-supervised super-resolution by searching the latent space of a
//! differentiable generator for images that downscale to a given
//! low-resolution input.
//!
//! The search runs projected gradient descent on the sphere of radius `√d`
//! over per-layer style vectors, minimizing a mean downscaling loss plus a
//! geodesic cross regularizer that keeps the style vectors close together.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod generator;
pub mod image;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod par;
pub mod rng;
pub mod sphere;

pub use error::{Error, Result};
pub use generator::{init_random_generator, GeneratorConfig, GeneratorSpec, LatentState};
pub use image::{build_downscaler, Image, Kernel, LinearResampler};
pub use objective::ObjectiveConfig;
pub use par::Execution;
pub use sphere::{multi_restart, run_pulse, OptimConfig, RunResult};
