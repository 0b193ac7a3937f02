use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("no contributions to aggregate")]
    NoContributions,
    #[error("heterogeneous ranks cannot be averaged factor-wise: {0}")]
    HeterogeneousRanksUnsupported(String),
    #[error("decay factor {0} outside (0, 1]")]
    InvalidDecay(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid adapter: {0}")]
    InvalidAdapter(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset of {0} samples is too small (need at least 10)")]
    DatasetTooSmall(usize),
    #[error("unseen pool exhausted: requested {requested}, {available} available")]
    PoolExhausted { requested: usize, available: usize },
    #[error("invalid resource distribution: {0}")]
    InvalidDistribution(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("i/o: {0}")]
    Io(String),
}
