//! Joint motion-compensated MR image reconstruction and registration.
//!
//! Given a series of single-shot k-space acquisitions of the same anatomy in
//! different motion states, this crate reconstructs one motion-free image
//! together with a dense deformation per acquisition by alternating five
//! sub-problem updates of a variational model: a pointwise hyperelastic
//! relaxation of the deformation gradient, a smoothing flow for the
//! deformation itself, a closed-form data/consistency update for the
//! per-acquisition images, an edge-weighted total-variation denoising step,
//! and an averaging update for the shared reconstruction.
//!
//! The crate is organized around small, independently testable modules:
//!
//! - [`field`]: dense scalar/vector/tensor grid containers.
//! - [`calculus`]: gradient, divergence, warping and Gaussian smoothing.
//! - [`fourier`]: the unitary sampling operator between image and k-space.
//! - [`edge_weights`]: edge-stopping weights for the weighted TV term.
//! - [`hyperelastic`]: the stored-energy density and its pointwise flow.
//! - [`deformation`]: Jacobians, inversion, composition and regridding.
//! - [`wtv`]: weighted-TV denoising via a projected dual iteration.
//! - [`solver`]: the multiscale alternating reconstruction loop.
//! - [`phantom`]: synthetic ellipse phantoms with scripted motion.
//! - [`metrics`]: PSNR, mutual information and endpoint error.
//! - [`io`]: binary field formats and PGM export.
//! - [`config`]: key=value configuration files and solver parameters.
//! - [`pipeline`]: the simulate/reconstruct/evaluate/export-maps commands
//!   used by the `mrmoco` binary and the runnable examples.

pub mod calculus;
pub mod config;
pub mod deformation;
pub mod edge_weights;
pub mod error;
pub mod field;
pub mod fourier;
pub mod hyperelastic;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod solver;
pub mod wtv;

pub use error::{Error, Result};
pub use field::{ComplexField, DisplacementField, ScalarField, TensorField, VectorField};
