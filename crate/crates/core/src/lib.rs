//! Simulator and verification harness for free-boundary compressible
//! neo-Hookean viscoelastic flow in Lagrangian coordinates on T x (0, 1).
//!
//! The library carries the flow map as a displacement from the identity,
//! evolves it with an explicit flux-form scheme whose boundary closure
//! replaces the x2-flux by the surface-tension traction, and ships the
//! diagnostic suite used by the verification experiments: exact discrete
//! identities (Piola, metric decomposition), the basic energy balance,
//! vanishing-viscosity sweeps, and boundary-layer indicators.

pub mod constitutive;
pub mod diagnostics;
pub mod dynamics;
pub mod experiments;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod mms;

pub use field::{BoundaryTrace, Face, MatrixField, ScalarField, VectorField};
pub use grid::Grid;
