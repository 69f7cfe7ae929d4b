use std::fmt;

/// A failure tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    inner: anyhow::Error,
}

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NAN_LOSS: u8 = 4;
pub const CHECKPOINT: u8 = 5;
pub const MISSING_PREDICTION: u8 = 6;
pub const GRADCHECK: u8 = 7;

impl CliError {
    pub fn new(code: u8, inner: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            inner: inner.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if f.alternate() {
            write!(f, "{:#}", self.inner)
        } else {
            write!(f, "{}", self.inner)
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches an exit code to any error.
pub trait Code<T> {
    fn code(self, code: u8) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for std::result::Result<T, E> {
    fn code(self, code: u8) -> Result<T> {
        self.map_err(|e| CliError::new(code, e))
    }
}

pub fn usage(msg: impl fmt::Display) -> CliError {
    CliError::new(USAGE, anyhow::anyhow!("{msg}"))
}
