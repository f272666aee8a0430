use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),

    #[error("invalid near/far planes: near {near}, far {far}")]
    InvalidNearFar { near: f64, far: f64 },

    #[error("ray opacity {0} is below the feature threshold")]
    LowOpacity(f64),

    #[error("projected depths span an empty interval")]
    DegenerateDepths,

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("no surface crossing found")]
    EmptySurface,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("loss diverged at iteration {iteration}: {detail}")]
    DivergedLoss { iteration: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
