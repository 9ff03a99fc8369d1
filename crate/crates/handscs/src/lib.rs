//! Structure-guided animatable Gaussian-splat hand model.
//!
//! The crate builds a complete desk-scale pipeline around a structural
//! coordinate space for articulated hands:
//!
//! - [`skeleton`]: a 21-joint parametric hand, forward kinematics, linear
//!   blend skinning, and the static bone topology.
//! - [`scs`]: the hybrid static/dynamic bone basis and the angular-radial
//!   descriptors that condition every Gaussian on the posed skeleton.
//! - [`nn`]: gated MLPs with manual reverse-mode gradients and Adam.
//! - [`gaussians`]: the Gaussian cloud, embedding-based deformation, and
//!   densification control.
//! - [`renderer`]: a tile-based differentiable CPU splatting renderer.
//! - [`losses`]: image losses, the inter-pose consistency loss with its EMA
//!   memory, and embedding smoothness.
//! - [`data`]: a synthetic multi-view oracle dataset generator.
//! - [`config`], [`train`], [`eval`]: the training/evaluation drivers behind
//!   the CLI.
//!
//! See the `examples/` directory for one runnable walkthrough per capability,
//! and the `handscs` binary for the batch interface.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussians;
pub mod knn;
pub mod losses;
pub mod math;
pub mod nn;
pub mod renderer;
pub mod scs;
pub mod skeleton;
pub mod train;

pub use error::Error;
pub use math::Real;
