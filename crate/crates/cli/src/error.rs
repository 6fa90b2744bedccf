use std::fmt;

use gmix::{ErrorCategory, GmmError};

use crate::document::DocumentError;
use crate::expr::ExprError;

/// Failure class, mapped one-to-one onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Validation,
    Parse,
    Numeric,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Validation => 2,
            Category::Parse => 3,
            Category::Numeric => 4,
            Category::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Validation => "validation",
            Category::Parse => "parse",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(Category::Validation, message)
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(Category::Parse, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(Category::Io, message)
    }

    /// Prefixes the message with where the problem was found.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.as_str(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        let category = match e.category() {
            ErrorCategory::Validation => Category::Validation,
            ErrorCategory::Numeric => Category::Numeric,
        };
        Self::new(category, e.to_string())
    }
}

impl From<DocumentError> for CliError {
    fn from(e: DocumentError) -> Self {
        match e {
            DocumentError::Invalid(g) => CliError::from(g),
            other => Self::parse(other.to_string()),
        }
    }
}

impl From<ExprError> for CliError {
    fn from(e: ExprError) -> Self {
        Self::parse(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
