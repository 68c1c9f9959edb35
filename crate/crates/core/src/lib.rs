//! Federated self-training for transducer models, at desk scale.
//!
//! - [`lattice`]: full-sum, band-restricted and self-restricted transducer
//!   losses, their gradients, Viterbi forced alignment and a brute-force
//!   enumeration oracle.
//! - [`model`]: a tiny encoder/predictor/joiner transducer with exact
//!   backpropagation, named parameter groups and adaptation masks.
//! - [`decoder`]: greedy and beam decoding producing pseudo labels,
//!   confidence scores and decoding alignments.
//! - [`trainer`]: the on-device side: example queue, filtering,
//!   augmentation, local optimizer steps and masked deltas.
//! - [`server`]: delta aggregation and the block-momentum server update.
//! - [`sim`]: synthetic data, pretraining, the adaptation driver,
//!   evaluation and persistence.

pub mod decoder;
pub mod error;
pub mod lattice;
pub mod model;
pub mod rng;
pub mod server;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
