//! Orchestration for mimicforge: run configuration, dataset preparation,
//! training, editing, evaluation, and the learning-signal experiment.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod pipeline;

use std::fmt;

/// Marks an error as a validation failure (exit code 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Bad input anywhere in the chain is a validation failure; everything else
/// (I/O, numerics, diverged training) is a runtime failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use mimicforge_core::Error as CoreError;
    use mimicforge_diffcore::Error as DiffError;
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<toml::de::Error>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            if matches!(e, CoreError::InvalidInput(_)) {
                return EXIT_VALIDATION;
            }
        }
        if let Some(e) = cause.downcast_ref::<DiffError>() {
            if matches!(e, DiffError::InvalidInput(_) | DiffError::Core(CoreError::InvalidInput(_))) {
                return EXIT_VALIDATION;
            }
        }
    }
    EXIT_RUNTIME
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_chain() {
        let e = anyhow::Error::new(Invalid("bad".into())).context("while loading");
        assert_eq!(exit_code(&e), EXIT_VALIDATION);
        let e = anyhow::anyhow!("disk on fire");
        assert_eq!(exit_code(&e), EXIT_RUNTIME);
        let e: anyhow::Error = mimicforge_diffcore::Error::NonFiniteLoss { step: 3, loss: f64::NAN }.into();
        assert_eq!(exit_code(&e), EXIT_RUNTIME);
    }
}
