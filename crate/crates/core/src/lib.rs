//! Multigrid memory networks.
//!
//! Convolutional LSTM cells arranged on a multiresolution pyramid mesh, the
//! writer/reader and encoder/decoder interfaces built from them, a synthetic
//! task suite (spatial mapping and localization, priority sort, associative
//! recall), a small trainer, and a receptive-field analyzer for multigrid
//! routing.
//!
//! Everything runs on a minimal CPU tensor engine with reverse-mode
//! differentiation ([`tensorcore`]).

pub mod assemblies;
mod codec;
pub mod error;
pub mod mglayers;
pub mod routing;
pub mod tasks;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
