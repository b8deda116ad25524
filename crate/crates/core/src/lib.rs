//! Image model, synthetic data, label synthesis, dataset construction and
//! evaluation for filament super-resolution.

pub mod dwdc;
pub mod error;
pub mod imgcore;
pub mod postmetrics;
pub mod preprocess;
pub mod synthlab;

pub use error::{Error, Result};
