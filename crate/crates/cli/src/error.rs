use std::fmt;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Io = 2,
    Validation = 3,
    Training = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Io,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Validation,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<uidlm::Error> for CliError {
    fn from(e: uidlm::Error) -> Self {
        use uidlm::Error as E;
        let kind = match &e {
            E::Io { .. } => ExitKind::Io,
            E::Csv(c) if c.is_io_error() => ExitKind::Io,
            E::Diverged { .. } | E::LossNotFinite { .. } => ExitKind::Training,
            _ => ExitKind::Validation,
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}
