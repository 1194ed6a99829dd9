//! Error taxonomy shared by the engine modules.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("w2_1d requires 1-d measures (got d = {got}); use w2_exact_small for d > 1")]
    WrongMethod { got: usize },

    #[error("{context}: atom count {got} exceeds the exact-solve limit {limit}")]
    SizeLimit {
        context: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("measure corruption: non-finite statistic value at atom {atom}")]
    MeasureCorruption { atom: usize },

    #[error("probe failure: non-finite coefficient evaluation at atom {atom}")]
    ProbeFailure { atom: usize },

    #[error("grid too coarse for third-order differencing: {points} points per axis, need at least {required}")]
    GridTooCoarse { points: usize, required: usize },

    #[error("spatial evaluation outside the grid box at knot {knot}")]
    OutOfDomain { knot: usize },

    #[error("capability: {0}")]
    Capability(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{diverged} of {total} replicas diverged at grid point {grid_point} (limit 1%)")]
    TooManyDiverged {
        grid_point: usize,
        diverged: usize,
        total: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
