// Index loops over several parallel arrays are the rule in the numeric
// kernels here; zipped-iterator rewrites obscure them.
#![allow(clippy::needless_range_loop)]

//! Character-level language modeling lab.
//!
//! Two models built from first principles over the same character streams:
//! a discrete hidden Markov model estimated with scaled Baum-Welch, and an
//! LSTM trained by explicit backpropagation through time. Both expose their
//! per-timestep hidden states, and `statecmp` scores how structurally
//! similar the two trajectories are via aligned cosine similarity across a
//! sweep of hidden-state counts.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod hmm;
pub mod linalg;
pub mod lstm;
pub mod statecmp;

mod jsonfmt;

pub use error::{Error, Result};
