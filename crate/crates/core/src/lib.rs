//! Numerical laboratory for nonuniformly expanding maps and semiflows:
//! iterated Birkhoff sums, martingale-coboundary decompositions on induced
//! towers, Green–Kubo and direct coefficient estimators, iterated weak
//! invariance principle checks, fast-slow homogenization and suspension
//! semiflows.

pub mod dynamics;
pub mod error;
pub mod fastslow;
pub mod harness;
pub mod io;
pub mod quadrature;
pub mod rng;
pub mod semiflow;
pub mod stats;
pub mod tower;
pub mod wip;

pub use error::{Error, Result};
