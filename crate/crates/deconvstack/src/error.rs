//! Crate-wide error type.

/// Errors surfaced by tensors, layers, model assembly, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch or an operation that would produce a malformed
    /// tensor (zero-sized dim, non-finite values, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid network or training configuration, including tie mismatches.
    #[error("config error: {0}")]
    Config(String),

    /// Bad runtime input (labels, masks, CLI values, sample mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// Operation called in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Malformed file contents; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn format(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format { msg: msg.into(), offset }
    }

    /// Prefix the message with a layer name so shape errors coming out of a
    /// deep forward pass point at the offending layer.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("[{layer}] {m}")),
            Error::Config(m) => Error::Config(format!("[{layer}] {m}")),
            Error::Input(m) => Error::Input(format!("[{layer}] {m}")),
            Error::State(m) => Error::State(format!("[{layer}] {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
