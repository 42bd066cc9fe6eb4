//! Reduced-order models for parametrized linear-quadratic optimal control
//! problems under uncertainty, built from weighted proper orthogonal decomposition.

pub mod fem;
pub mod harness;
pub mod io;
pub mod mesh;
pub mod ocp;
pub mod quadrature;
pub mod rom;
pub mod sparse;
pub mod wpod;
