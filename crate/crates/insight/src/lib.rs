//! Host-side companion to `insight-core`: file formats, dataset management,
//! run configuration, and the command implementations behind the CLI.

pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod history;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::{AppError, Result};
