//! Robust decentralized nonlinear MPC for multi-agent navigation.
//!
//! Agents solve their finite-horizon problems one at a time in a fixed
//! round-robin order. Each problem tightens its state constraints by a
//! Grönwall tube so that the true, disturbed motion stays inside the
//! original constraints, and ends in a terminal sublevel set of a quadratic
//! value function.

pub mod certify;
pub mod constraints;
pub mod coordination;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod runlog;
pub mod ocp;
pub mod scenario;
pub mod setalg;

pub use error::{Error, Result};
