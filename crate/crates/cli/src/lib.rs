//! Pipeline orchestration behind the `cloq` binary.

pub mod config;
pub mod error;
pub mod gram;
pub mod run;
pub mod synth;
pub mod validate;

pub use config::{Diagnostic, RunConfig};
pub use error::{CliError, CliResult};
pub use run::{run, run_bundle, Mode, RunOutcome};
