//! Device-independent lower bounds on the Shannon entropy and min-entropy
//! of Bell-test outputs.
//!
//! Outcome probabilities at a chosen input pair are bounded with moment
//! relaxations of the quantum set under a noise-scaled Bell-value
//! constraint; the entropy is then minimized globally over the resulting
//! polytope.

pub mod analysis;
pub mod catalog;
pub mod entropy;
pub mod error;
pub mod npa;
pub mod par;
pub mod probbounds;
pub mod scenario;
pub mod sdp;

pub use error::{Error, Result};
