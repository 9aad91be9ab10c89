//! Test-only oracles.
//!
//! Everything here is written independently of the production code paths:
//! direct-loop f64 operators, central finite differences, and brute-force
//! re-derivations of the decision rules. The production crate never depends
//! on this one.

pub mod gradcheck;
pub mod reference;
pub mod rules;
