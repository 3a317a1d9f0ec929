//! File formats, run configuration, checkpoints and the command line for
//! [`gnnad_core`].
//!
//! The `gnnad` binary wraps [`commands`]; the same steps are available as
//! library calls in [`pipeline`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use error::{AppError, Result};
