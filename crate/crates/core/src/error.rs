use std::path::PathBuf;

use thiserror::Error;

use crate::scene::KeyframeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("shape mismatch: expected {expected:?}, found {found:?}")]
pub struct ShapeError {
    pub expected: (usize, usize),
    pub found: (usize, usize),
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("cannot render a zero-size image ({width}x{height})")]
    EmptyImage { width: usize, height: usize },
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmallForWindow {
        width: usize,
        height: usize,
        window: usize,
    },
}

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("need at least {needed} matches with positive confidence, got {found}")]
    TooFewMatches { needed: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("pose graph is disconnected: keyframe {0} is unreachable from the gauge keyframe")]
    Disconnected(KeyframeId),
    #[error("edge references unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),
    #[error("no keyframes in the graph")]
    Empty,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("primitive anchored to keyframe {0}, which has no pose")]
    MissingAnchor(KeyframeId),
    #[error("unknown keyframe id {0}")]
    UnknownFrame(KeyframeId),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 poses, got {0}")]
    TooShort(usize),
    #[error("degenerate trajectory: positions do not span a plane")]
    Degenerate,
}

#[derive(Debug, Error)]
pub enum SlamError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("tracking failed at frame {frame}: {source}")]
    Track {
        frame: usize,
        #[source]
        source: TrackError,
    },
    #[error("tracking diverged at frame {frame}: {message}")]
    Diverged { frame: usize, message: String },
    #[error("dataset has no ground-truth trajectory, which the correspondence oracle needs")]
    MissingGroundTruth,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl SlamError {
    /// Whether the failure is numerical rather than a problem with inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, SlamError::Track { .. } | SlamError::Diverged { .. })
    }
}

/// I/O and parse failures for every on-disk format.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed data at byte {offset}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{}: line {line}: {message}", path.display())]
    BadLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl FormatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn malformed(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        FormatError::Malformed {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn bad_line(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        FormatError::BadLine {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
