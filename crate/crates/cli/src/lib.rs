//! Command implementations behind the `encnet` binary.

pub mod commands;
pub mod config;

pub use commands::Report;
pub use config::RunConfig;

use encnet::Error;

/// Process exit status for a failed command: 1 for validation failures,
/// 2 for numerical-check failures, 3 for I/O and format errors.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Shape { .. }
        | Error::Invalid { .. }
        | Error::Population { .. }
        | Error::AllIgnored
        | Error::LabelOutOfRange { .. }
        | Error::EmptyEvaluation
        | Error::Config(_) => 1,
        Error::NonDeterministic(_) | Error::Diverged { .. } => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
    }
}

/// Exit status for a command that ran to completion.
pub const CHECK_FAILED: i32 = 2;
