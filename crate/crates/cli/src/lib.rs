//! Experiment harness: data generation, training, decoding, evaluation and reports.

pub mod commands;
pub mod config;
pub mod results;

/// A problem with the inputs rather than with the run; exits with status 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Exit status for an error: the outermost classifiable cause decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use pbs_core::Error as E;
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidParameter { .. }
                | E::DimensionMismatch { .. }
                | E::EmptyDataset
                | E::LengthMismatch(..)
                | E::Format(_)
                | E::Json(_) => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}
