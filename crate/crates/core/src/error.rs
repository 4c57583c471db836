use thiserror::Error;

/// Errors shared across the pose, kinematics, model and training modules.
#[derive(Debug, Error)]
pub enum KasError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value at frame {frame}, joint {joint}")]
    NonFinite { frame: usize, joint: usize },

    #[error("degenerate bone {bone} (zero length)")]
    DegenerateBone { bone: usize },

    #[error("limb {limb:?}: expected {expected} bones, parameters sized for {got}")]
    LimbArity {
        limb: String,
        expected: usize,
        got: usize,
    },

    #[error("missing gradient for parameter {0:?}")]
    MissingGradient(String),

    #[error("parameter {0:?} not found")]
    UnknownParameter(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("joint behind camera at frame {frame}")]
    BehindCamera { frame: usize },

    #[error("frame {frame} is unalignable (rank-deficient point set)")]
    Unalignable { frame: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KasError>;
