//! Non-technical-loss detection for smart-meter fleets.
//!
//! Telemetry is cut into 10-day windows, turned into seven-channel kernel
//! density images of feature pairs, and classified by a shared ConvNet
//! trained with a mean-teacher semi-supervised procedure.

pub mod error;
pub mod evaluate;
pub mod features;
pub mod ingest;
pub mod netcore;
pub mod profile;
pub mod synth;
pub mod trainer;

pub use error::{NtlError, Result};
