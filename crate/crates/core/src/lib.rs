//! Physics-augmented point-set diffusion for 2D soft-robot co-design.
//!
//! The crate is organised bottom-up:
//!
//! - [`shapes`]: point sets, the procedural shape corpus and the Chamfer metric.
//! - [`denoiser`]: the permutation-equivariant noise predictor with hand-written
//!   backward pass and Adam.
//! - [`diffusion`]: noise schedule, forward noising, training loss, guided
//!   ancestral sampling.
//! - [`robotize`]: point set to simulatable soft robot, plus the kernel
//!   gradient map back to the diffusion sample.
//! - [`mpmsim`]: differentiable MLS-MPM with muscle-fibre actuation and a
//!   full-storage adjoint.
//! - [`tasks`]: the six task environments, their metrics and losses.
//! - [`codesign`]: embedding optimisation, diffusion-as-co-design sampling and
//!   the voxel/particle baselines.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codesign;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod mpmsim;
pub mod robotize;
pub mod rng;
pub mod shapes;
pub mod tasks;

pub use error::{Error, Result};
pub use shapes::PointSet;
