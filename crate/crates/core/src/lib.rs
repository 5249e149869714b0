//! Quantum Parisi variational formula for transverse-field mean-field spin
//! glasses, with exact small-size cross-checks.
//!
//! The crate is layered bottom-up:
//!
//! * [`stochastics`]: seeded random streams, Gauss–Hermite rules, MC estimates.
//! * [`quantum`]: dense Hamiltonians on `2^N` states, partition functions,
//!   Gibbs and Duhamel expectations, the complex-coupled corrected model.
//! * [`trotter`]: the Suzuki–Trotter classical path representation.
//! * [`rsb`]: the ζ-recursion, Parisi functional, its optimization and the
//!   Hopf–Lax outer problem.
//! * [`interp`]: Guerra interpolation at desk scale.
//! * [`cli`]: the `qparisi` command-line driver.

pub mod cli;
pub mod error;
pub mod interp;
pub mod optim;
pub mod quantum;
pub mod rsb;
pub mod stochastics;
pub mod trotter;

pub use error::{Error, Result};
