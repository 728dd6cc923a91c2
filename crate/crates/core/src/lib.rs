//! Parameter-level personalized federated learning.
//!
//! Each sampled client searches for the individual parameters that move the
//! most under local training ([`gradltn`]), keeps those as personal weights,
//! alternates SGD passes over the personal and shared partitions
//! ([`localalt`]), and sends only the shared partition to the server, which
//! averages it position-wise over the clients that share each coordinate
//! ([`server`]). A plain FedAvg baseline and mask analysis ([`metrics`]) are
//! included for comparison.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, config and the
//! command-line runner live in the `fedselect` crate.

#![no_std]

extern crate alloc;

pub mod blob;
pub mod data;
pub mod error;
pub mod gradltn;
pub mod localalt;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
pub use mask::MaskVector;
pub use model::{Batch, Gradient, ModelSpec, ParamVector};
