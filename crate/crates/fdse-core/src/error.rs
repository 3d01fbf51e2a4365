use thiserror::Error;

/// Coarse error class, used by callers (e.g. the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum FdseError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("batch normalization needs a batch of at least 2 in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("tape already consumed by backward; rebuild the forward pass first")]
    StaleTape,

    #[error("invalid expansion: G={expansion} exceeds output channels T={out_channels}")]
    InvalidExpansion { expansion: usize, out_channels: usize },

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("layer has zero feature dimension")]
    EmptyLayer,

    #[error("config error: {0}")]
    Config(String),

    #[error("aggregation requires at least one client")]
    NoClients,

    #[error("parameter alignment error: {0}")]
    Alignment(String),

    #[error("operation not applicable: {0}")]
    NotApplicable(String),

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FdseError {
    pub fn category(&self) -> ErrorCategory {
        use FdseError::*;
        match self {
            Config(_) | InvalidExpansion { .. } | Architecture(_) => ErrorCategory::Config,
            Parse { .. } | Io { .. } | EmptyData(_) | Alignment(_) => ErrorCategory::Data,
            _ => ErrorCategory::Runtime,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FdseError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        FdseError::Parse { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, FdseError>;
