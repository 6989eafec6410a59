use thiserror::Error;

/// Failures of a command, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    BoundViolation(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 0 is success; 1 covers bad input and unusable paths, 2 singular
    /// systems or diverging training, 3 a failed bound check.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) | CliError::Csv(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::BoundViolation(_) => 3,
        }
    }
}

impl From<toc_align::Error> for CliError {
    fn from(e: toc_align::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(vec![e.to_string()])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation(vec![]).exit_code(), 1);
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 2);
        assert_eq!(CliError::BoundViolation(String::new()).exit_code(), 3);
        let singular = toc_align::Error::Singular {
            context: "x",
            condition: 1e20,
            advice: "",
        };
        assert_eq!(CliError::from(singular).exit_code(), 2);
        let bad = toc_align::Error::Validation("x".into());
        assert_eq!(CliError::from(bad).exit_code(), 1);
    }
}
