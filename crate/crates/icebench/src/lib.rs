//! File formats, the external scorer protocol, and run orchestration for the
//! icebench faithfulness engine. The algorithms live in [`icebench_core`].

pub mod attribution_io;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod manifest;
pub mod model_io;
pub mod pipeline;
pub mod stats;
pub mod tables;
pub mod wire;

pub use error::Error;
pub use icebench_core as core;
