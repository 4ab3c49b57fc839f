use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("no frames found in {0}")]
    EmptySequence(PathBuf),

    #[error("{path}: frame is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    MixedDimensions {
        path: PathBuf,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("box {x},{y} {w}x{h} exceeds frame {frame_h}x{frame_w}")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: usize,
        h: usize,
        frame_h: usize,
        frame_w: usize,
    },

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: bad raw grid file: {message}")]
    BadGrid { path: PathBuf, message: String },

    #[error("need at least {need} matches, got {got}")]
    TooFewMatches { need: usize, got: usize },

    #[error("degenerate homography: {0}")]
    DegenerateHomography(String),

    #[error("no valid labels to gate")]
    NoValidLabels,

    #[error("sequence too short: {frames} frames, need {need}")]
    SequenceTooShort { frames: usize, need: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape does not match the current parameters ({0})")]
    StaleTape(String),

    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),

    #[error("{path}: checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("checkpoint layer spec hash {found:016x} does not match expected {expected:016x}")]
    SpecMismatch { expected: u64, found: u64 },

    #[error("pair {pair}: only {available} cross-video candidates, need {need}")]
    NotEnoughNegatives {
        pair: usize,
        available: usize,
        need: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: manifest line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
