//! Continuous parameter-space symmetries of small neural networks.
//!
//! The crate covers linear and data-dependent group actions on MLP
//! parameters, the conserved quantities of gradient flow that those actions
//! induce, and a handful of desk-scale experiments built on top of them.

pub mod conserved;
pub mod experiments;
pub mod flow;
pub mod linalg;
pub mod network;
pub mod nonlinear;
pub mod symmetry;
