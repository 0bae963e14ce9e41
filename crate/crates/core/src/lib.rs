//! GraphScan local semantic routing in front of a selective state-space
//! scan, with executable checks of the routed-versus-base identities and a
//! forward-only hierarchical backbone.

#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod error;
pub mod graphscan;
pub mod routed_analysis;
pub mod selective_scan;
pub mod tensor;

pub use error::{Error, Result};
