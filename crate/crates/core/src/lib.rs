//! Finite-volume solver for the dimensionless Poisson-Nernst-Planck-Fourier
//! system on admissible orthogonal meshes.
//!
//! Two time integrators are provided: a first-order semi-implicit scheme
//! ([`scheme1`]) and a second-order modified Crank-Nicolson scheme in log
//! variables ([`scheme2`]). Both conserve mass, keep concentrations and
//! temperature positive and satisfy a discrete entropy inequality, which
//! [`diagnostics`] checks at run time.

pub mod diagnostics;
pub mod dual;
pub mod experiments;
pub mod linsys;
pub mod mesh;
pub mod mms;
pub mod model;
pub mod operators;
pub mod par;
pub mod scheme1;
pub mod scheme2;
pub mod stepper;
