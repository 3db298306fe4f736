use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or index sets that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite or non-positive value where a positive finite one is required.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("degenerate layer `{0}`: no active parameters left")]
    DegenerateLayer(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Structural(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 3,
            Error::Numeric { .. } | Error::DegenerateLayer(_) | Error::Divergence { .. } => 4,
        }
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Structural(format!(
            "{what}: length {got}, expected {want}"
        )));
    }
    Ok(())
}
