use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("inconsistent dataset: {0}")]
    InconsistentDataset(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid pose for frame {frame}: {reason}")]
    InvalidPose { frame: usize, reason: String },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("view direction {index} is not unit length (norm {norm})")]
    InvalidDirection { index: usize, norm: f64 },
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    InvalidPixel { x: i64, y: i64, width: usize, height: usize },
    #[error("invalid ray range: near {near} must be positive and below far {far}")]
    InvalidRange { near: f64, far: f64 },
    #[error("invalid samples: {0}")]
    InvalidSamples(String),
    #[error("frame {t} out of range for {frames} frames")]
    InvalidFrame { t: usize, frames: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("alpha value {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid thresholds: low {lo} must be below high {hi}")]
    InvalidThresholds { lo: f64, hi: f64 },
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("loss diverged at step {step}: {detail}")]
    DivergedLoss { step: usize, detail: String },
    #[error("frame {0} is fully excluded by the retraining mask")]
    FrameFullyMasked(usize),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad inputs or configuration, as opposed to
    /// runtime failures of the optimization.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::DivergedLoss { .. } | Error::Io(_))
    }
}
