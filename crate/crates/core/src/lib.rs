//! Learning and planning in latent multi-armed bandits.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod mle;
pub mod model;
pub mod moments;
pub mod pipeline;
pub mod planning;
pub mod recover;
pub mod rng;
pub mod subspace;

pub use error::{LmabError, Result};
