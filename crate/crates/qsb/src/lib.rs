//! File formats, benchmark harness and command-line front end for the
//! quantile regression benchmark built on `qsb-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod model_file;
pub mod report;

pub use error::{QsbError, Result};
