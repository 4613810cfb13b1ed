//! Electrode-based membrane potential mapping workbench.
//!
//! The crate covers the whole chain from a simulated excitable sheet to a
//! scored reconstruction:
//!
//! * [`tissue`] generates ground-truth membrane potential movies with an
//!   Aliev–Panfilov reaction–diffusion model.
//! * [`sensing`] places 20-electrode catheter arrays over the sheet and
//!   synthesizes unipolar electrograms with a current-source forward model.
//! * [`baseline`] builds the classical activation map: activation detection
//!   followed by thin-plate-spline interpolation of elapsed time.
//! * [`phase`] computes analytic-signal phase, phase variance, phase
//!   singularities, isochrones and the cycle-length episode filter.
//! * [`nn`], [`dataset`] and [`train`] implement the learned reconstruction
//!   that maps electrogram windows to membrane potential frames.
//! * [`eval`] scores both pipelines with SSIM on phase-variance maps.

pub mod baseline;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod phase;
pub mod sensing;
pub mod tissue;
pub mod train;

pub use error::{DeapError, Result};
pub use grid::{GridSpec, VmMovie};
