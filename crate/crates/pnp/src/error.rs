use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PnpError {
    #[error("config error: {key}: {detail}")]
    Config { key: String, detail: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {} at byte {offset}: {detail}", path.display())]
    Format { path: PathBuf, offset: u64, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch for tensor `{name}`: {detail}")]
    Shape { name: String, detail: String },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error(transparent)]
    Core(#[from] pnp_core::Error),
}

pub type Result<T, E = PnpError> = std::result::Result<T, E>;

impl PnpError {
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        PnpError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PnpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 I/O, 4 numeric, 5 shape, 6 constraint.
    pub fn exit_code(&self) -> i32 {
        use pnp_core::Error as E;
        match self {
            PnpError::Config { .. } => 2,
            PnpError::Io { .. } | PnpError::Format { .. } => 3,
            PnpError::Numeric(_) => 4,
            PnpError::Shape { .. } => 5,
            PnpError::Constraint(_) => 6,
            PnpError::Core(e) => match e {
                E::Config { .. } | E::Validation(_) => 2,
                E::Diverged { .. } | E::NonFinite { .. } => 4,
                E::Dimension { .. } | E::Registry(_) => 5,
                E::Constraint { .. } => 6,
                E::Contract(_) => 1,
            },
        }
    }
}
