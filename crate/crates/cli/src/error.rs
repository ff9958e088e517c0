use lmstack_core::Error as CoreError;
use lmstack_core::TensorError;

/// Errors a command can end with. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("output directory {0} is locked by another run")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            CliError::Core(e) => match e {
                CoreError::Config(_) => EXIT_CONFIG,
                CoreError::NonFinite { .. } | CoreError::Numerical(_) => EXIT_NUMERICAL,
                CoreError::Tensor(TensorError::Domain { .. }) => EXIT_NUMERICAL,
                CoreError::Checkpoint(_) => EXIT_CHECKPOINT,
                _ => EXIT_OTHER,
            },
            CliError::Locked(_) | CliError::Io(_) | CliError::Json(_) => EXIT_OTHER,
        }
    }
}

/// Routes a failure while loading `path` to the checkpoint exit code.
pub fn checkpoint_err(path: &std::path::Path, e: CoreError) -> CliError {
    match e {
        CoreError::Io(io) => CliError::Checkpoint(format!("{}: {io}", path.display())),
        CoreError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
        other => CliError::Checkpoint(format!("{}: {other}", path.display())),
    }
}
