use std::fmt;

use matte_core::backend::BackendError;
use matte_core::eval::EvalError;
use matte_core::inversion::InversionError;
use matte_core::probe::ProbeError;
use matte_core::router::GridError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Backend,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Backend => 4,
            Category::Io => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Backend => "backend",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
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

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }
}

/// `matte: error[<category>]: <message>` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace('\n', " ");
        write!(f, "matte: error[{}]: {}", self.category.name(), msg.trim())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        use BackendError::*;
        let category = match &e {
            PromptTooLong { .. }
            | UnregisteredPlaceholder(_)
            | InvalidPlaceholder(_)
            | EmptyWord
            | TooManySteps { .. }
            | InvalidSampler(_)
            | Grid(_) => Category::Config,
            _ => Category::Backend,
        };
        Self::new(category, e.to_string())
    }
}

impl From<InversionError> for CliError {
    fn from(e: InversionError) -> Self {
        match e {
            InversionError::Backend(b) => b.into(),
            InversionError::NonFinite { .. } => Self::new(Category::Backend, e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Backend(b) => b.into(),
            ProbeError::Io(io) => io.into(),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(b) => b.into(),
            EvalError::Inversion(i) => i.into(),
            EvalError::Encoder(_) => Self::new(Category::Backend, e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => io.into(),
            other => Self::config(format!("image: {other}")),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}
