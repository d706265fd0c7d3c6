use thiserror::Error;

pub type Result<T, E = LmabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LmabError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An exact enumeration would exceed its size guard; callers are expected
    /// to fall back to a sampling or heuristic path.
    #[error("{what}: size {size:.3e} exceeds guard {limit:.3e}")]
    GuardExceeded { what: &'static str, size: f64, limit: f64 },

    #[error("feature matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("design solver stopped at g = {g_value:.6} > 2k = {bound:.1} after {iterations} iterations")]
    DesignNotConverged { g_value: f64, bound: f64, iterations: usize },

    #[error("eigensolver did not converge")]
    EigenNotConverged,

    #[error("policy depth {depth} is shorter than horizon {horizon}")]
    PolicyTooShallow { depth: usize, horizon: usize },

    #[error("rejection sampling exhausted {0} retries")]
    RetriesExhausted(usize),

    #[error("transport problem: {0}")]
    Transport(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LmabError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LmabError {
    pub fn at_stage(self, stage: &'static str) -> Self {
        LmabError::Stage { stage, source: Box::new(self) }
    }
}

/// Extension for tagging a result with the pipeline stage that produced it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
