use std::fmt;

use cbexperts::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// A failure reported as one line: `error: code=N kind=K message=...`.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind,
            message: message.into(),
        }
    }

    pub fn data(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message: String = self
            .message
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        write!(f, "error: code={} kind={} message={}", self.code, self.kind, message.trim())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidConfig(_) => (EXIT_CONFIG, "invalid_config"),
            Error::DimensionMismatch { .. } => (EXIT_DATA, "dimension_mismatch"),
            Error::LabelOutOfRange { .. } => (EXIT_DATA, "label_out_of_range"),
            Error::Parse { .. } => (EXIT_DATA, "parse"),
            Error::EmptyFold(_) => (EXIT_DATA, "empty_fold"),
            Error::MissingExpert(_) => (EXIT_DATA, "missing_expert"),
            Error::EmptyClass(_) => (EXIT_DATA, "empty_class"),
            Error::KeyMismatch(_) => (EXIT_DATA, "key_mismatch"),
            Error::Divergence { .. } => (EXIT_DIVERGENCE, "divergence"),
            Error::NonFinite(_) => (EXIT_DIVERGENCE, "non_finite"),
            Error::Io(_) => (EXIT_DATA, "io"),
            Error::Csv(_) => (EXIT_DATA, "csv"),
            Error::Json(_) => (EXIT_DATA, "json"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_onto_exit_classes() {
        assert_eq!(CliError::from(Error::config("x")).code, 2);
        assert_eq!(CliError::from(Error::EmptyClass(3)).code, 3);
        assert_eq!(CliError::from(Error::NonFinite("loss")).code, 4);
        let e = CliError::from(Error::Divergence { epoch: 2, loss: f64::NAN });
        assert_eq!((e.code, e.kind), (4, "divergence"));
    }

    #[test]
    fn display_is_a_single_line() {
        let e = CliError::data("parse", "bad\nvalue\r\n");
        assert_eq!(e.to_string(), "error: code=3 kind=parse message=bad value");
    }
}
