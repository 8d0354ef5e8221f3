//! Test-time adaptation for layout-aware document models.

pub mod adapt;
pub mod docdata;
pub mod docmodel;
pub mod error;
pub mod evalmetrics;
pub mod harness;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
