use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grasp rectangle centered at ({x:.2}, {y:.2}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("quality map is all zero, no grasp to decode")]
    NoGrasp,
    #[error("cannot decode an angle from (sin, cos) = (0, 0)")]
    DegenerateAngle,
    #[error("rectangle has zero area")]
    ZeroArea,
    #[error("ground-truth grasp set is empty")]
    EmptyGroundTruth,
    #[error("expression {0:?} contains no known attribute or object word")]
    UnrecognizedExpression(String),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("no cloud points fall inside the grasp rectangle")]
    EmptyRegion,
    #[error("point cloud has {have} points, need at least {need}")]
    InsufficientGeometry { have: usize, need: usize },
    #[error("no candidate grasp overlaps any graspable point")]
    NoFeasibleGrasp,
    #[error("grasp pose is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("could not place {0} objects without overlap")]
    Placement(usize),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("container truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncation {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("split {0:?} not found in dataset manifest")]
    SplitNotFound(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::NoGrasp => "NoGrasp",
            Error::DegenerateAngle => "DegenerateAngle",
            Error::ZeroArea => "ZeroArea",
            Error::EmptyGroundTruth => "EmptyGroundTruth",
            Error::UnrecognizedExpression(_) => "UnrecognizedExpression",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::EmptyRegion => "EmptyRegion",
            Error::InsufficientGeometry { .. } => "InsufficientGeometry",
            Error::NoFeasibleGrasp => "NoFeasibleGrasp",
            Error::BehindCamera(_) => "BehindCamera",
            Error::UnknownToken { .. } => "UnknownToken",
            Error::Shape(_) => "ShapeError",
            Error::Config(_) => "ConfigError",
            Error::Graph(_) => "GraphError",
            Error::EmptyDataset => "EmptyDataset",
            Error::Placement(_) => "PlacementError",
            Error::Format(_) => "FormatError",
            Error::Truncation { .. } => "TruncationError",
            Error::DuplicateName(_) => "DuplicateName",
            Error::SplitNotFound(_) => "SplitNotFound",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
