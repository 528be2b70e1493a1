//! Pipeline driver for `negrec`: configuration, resumable steps over a run
//! directory, and report emission.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{Run, Step, Variant};
pub use report::{emit_report, Report};
