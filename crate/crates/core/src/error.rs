use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("construction failed: {0}")]
    ConstructionFailed(String),
    #[error("frequency k={k} below k_min={k_min} (image distance {image_dist:.3e}, residual {residual:.3e})")]
    FrequencyTooLow {
        k: u32,
        k_min: u32,
        image_dist: f64,
        residual: f64,
    },
    #[error("resolution too coarse: {0}")]
    ResolutionTooCoarse(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("gamma constraint violated: need 1 < gamma <= 1 + 2/n, got gamma={gamma}, n={n}")]
    GammaConstraint { gamma: f64, n: usize },
    #[error("vacuum: density {rho:.3e} below floor")]
    Vacuum { rho: f64 },
    #[error("step size: {0}")]
    StepSize(String),
    #[error("rejected defect extract: {0}")]
    RejectedExtract(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("io: {0}")]
    Io(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code used by the CLI: 2 precondition, 3 construction, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::ConstructionFailed(_)
            | Error::FrequencyTooLow { .. }
            | Error::ResolutionTooCoarse(_)
            | Error::Vacuum { .. }
            | Error::StepSize(_)
            | Error::RejectedExtract(_) => 3,
            Error::Verification(_) | Error::Snapshot(_) => 4,
            _ => 2,
        }
    }

    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
