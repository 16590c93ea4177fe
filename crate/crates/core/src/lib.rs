//! Bitemporal building-change detection.
//!
//! Two co-registered images pass through a shared encoder, per-level token
//! alignment, a difference-and-FPN fusion stage and a query-based mask
//! decoder that can be conditioned on text.

pub mod backbone;
pub mod bev;
pub mod dataio;
pub mod error;
pub mod fuse;
pub mod harness;
pub mod maskdec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod textcond;

pub use error::{Error, Result};
pub use model::{ModelConfig, SegChangeModel};
