//! Error classes mapped onto the process exit code.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Input = 2,
    Config = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub class: ExitClass,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(class: ExitClass, error: impl Into<anyhow::Error>) -> Self {
        Failure { class, error: error.into() }
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Failure::new(ExitClass::Input, anyhow::anyhow!("{msg}"))
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Failure::new(ExitClass::Config, anyhow::anyhow!("{msg}"))
    }

    pub fn code(&self) -> u8 {
        self.class as u8
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Tags a fallible value with its exit class and a context line.
pub trait Classify<T> {
    fn or_exit(self, class: ExitClass, context: impl fmt::Display) -> CliResult<T>;

    fn input_err(self, context: impl fmt::Display) -> CliResult<T>
    where
        Self: Sized,
    {
        self.or_exit(ExitClass::Input, context)
    }
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn or_exit(self, class: ExitClass, context: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure::new(class, e.into().context(context.to_string())))
    }
}
