use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no complete helical turn in trajectory ({span:.4} rad of unwrapped angle)")]
    NoCompleteTurn { span: f64 },

    #[error(
        "sub-volume thickness {thickness} too small: turn {turn} rays touch slices {lo}..{hi}, \
         allotted {alo}..{ahi}"
    )]
    CoverageViolated {
        turn: usize,
        thickness: usize,
        lo: isize,
        hi: isize,
        alo: usize,
        ahi: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("trajectory truncation left no source position inside the volume")]
    EmptyTrajectory,

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tam-danielsson window: {0}")]
    TamDanielsson(String),

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("slice {0} has zero total gluing weight")]
    UncoveredSlice(usize),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that signal numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Diverged(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
