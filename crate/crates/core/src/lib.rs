//! Neural-network solver for smooth dynamical systems `ż = F(z)`.
//!
//! * [`net`]: sin-activated MLP with an exact initial-condition trunk.
//! * [`systems`]: catalog of Hamiltonian flows and an RK4 reference solver.
//! * [`training`]: unsupervised residual training on random collocation times.
//! * [`error_correction`]: error bound, recursive error estimator and the
//!   phased error-corrected training loop.
//! * [`koopman`]: DMD-style Koopman approximation of the training flow.

pub mod dual;
pub mod error;
pub mod error_correction;
pub mod koopman;
pub mod net;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
