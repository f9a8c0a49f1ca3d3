//! Numerical laboratory for Willmore necks on cylinders.
//!
//! The crate evaluates the second-order geometry of sampled immersions
//! `f: [t_min, t_max] x S^1 -> R^n`, the conservation-law residues attached
//! to translations and rotations, three-circle inequalities for weighted
//! harmonic norms and segment energies, exponential decay fits, and a
//! gradient descent on the Willmore energy used to synthesize test necks.

pub mod catalog;
pub mod cylgrid;
pub mod geometry;
pub mod harmonic;
pub mod neck;
pub mod optimizer;
pub mod error;
pub mod par;
pub mod residues;

pub use error::{LabError, Result};
