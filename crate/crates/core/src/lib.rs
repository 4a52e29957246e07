//! Hybrid magnetic core-loss prediction.
//!
//! A spectral-entropy switch picks between the Steinmetz equation and iGSE
//! as an empirical prior; a deep network (autoencoder, positional encoding,
//! multi-head attention, CNN and Bi-LSTM branches, adaptive fusion, MLP
//! head) refines it, trained against a two-term relative-error objective.

pub mod data;
pub mod empirical;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
