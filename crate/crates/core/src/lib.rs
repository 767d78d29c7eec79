//! Receding-horizon control of a cable-driven tensegrity spine.
//!
//! The crate bundles a rigid-vertebra cable plant ([`model`]), finite-difference
//! affine models of it ([`linearize`]), a convex QP solver ([`qp`]), the two
//! horizon problem builders ([`cftoc`]), force-density inverse kinematics
//! ([`ik`]), reference generation ([`trajectory`]) and the closed loop that
//! ties them together ([`closed_loop`]).

pub mod cftoc;
pub mod closed_loop;
pub mod ik;
pub mod linearize;
pub mod model;
pub mod qp;
pub mod trajectory;

pub use model::{Dimension, InputVector, ModelError, SpineConfig, StateLayout, StateVector};
