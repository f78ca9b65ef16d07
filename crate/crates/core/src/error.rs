use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "{params} regression parameters but only {observations} observations; \
         keep fewer covariates at the screening stage"
    )]
    DimensionTooLarge { params: usize, observations: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("constant-coefficient covariates are collinear after profiling: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("covariance not estimable: {0}")]
    NotEstimable(String),

    #[error("no feasible bandwidth in grid: {0}")]
    NoFeasibleBandwidth(String),

    #[error("no penalized fit converged: {0}")]
    NoConvergentFit(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::InvalidInput(_) | Error::Shape(_) | Error::Io(_) | Error::Csv(_) => {
                ErrorKind::Data
            }
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Numeric,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
