//! End-to-end ghost imaging experiment: load an object, sample correlator
//! outputs, reduce them and write images plus an SNR report.

pub mod acquisition;
pub mod config;
pub mod error;
pub mod image_io;
pub mod pipeline;
pub mod report;

pub use error::{HarnessError, Result};
