//! Satellite downlink simulation and deep joint source-channel coding.

pub mod channel;
pub mod data;
pub mod error;
pub mod harness;
pub mod link;
pub mod model;
pub(crate) mod quad;

pub use error::{Error, Result};
