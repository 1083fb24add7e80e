//! Graph energy matching: a discrete energy-based generative model for
//! attributed graphs.
//!
//! A permutation-invariant scalar potential over one-hot graph embeddings is
//! trained with a flow-like transport loss plus a contrastive term. Sampling
//! runs greedy, gradient-ranked graph edits until an energy-based switch
//! fires, then gradient-informed factorized proposals under
//! Metropolis–Hastings. The same potential supports property guidance and
//! energy-weighted geodesics between graphs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dense;
pub mod energy;
pub mod error;
pub mod geodesics;
pub mod graph;
pub mod guidance;
pub mod matching;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod proposals;
pub mod sampler;
pub mod training;

pub use energy::{EnergyGradient, EnergyModel, Potential};
pub use error::{GemError, Result};
pub use graph::{Embedding, Graph, GraphSpec};
