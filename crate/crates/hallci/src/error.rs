use thiserror::Error;

/// Errors raised by the engine. Messages are stable and matched by the CLI tests.
#[derive(Debug, Error)]
pub enum Error {
    #[error("n_x must be power of two (got {0})")]
    GridSize(usize),
    #[error("n_t must be at least 1")]
    TimeGrid,
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    PayloadSize { expected: usize, got: usize },
    #[error("unknown snapshot version {0}")]
    Version(u32),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("rank mismatch: {0}")]
    RankMismatch(String),
    #[error("symmetry violated: {0}")]
    Symmetry(String),
    #[error("kernel under-resolved: mollification scale {l} is below grid spacing {h}")]
    KernelUnderResolved { l: f64, h: f64 },
    #[error("input not divergence-free: relative divergence {0:e}")]
    NotDivergenceFree(f64),
    #[error("norm not implemented for {0}")]
    NormKind(String),
    #[error("under-resolved block: n_x = {n} < 8*mu*sigma*n_lambda = {need}")]
    UnderResolved { n: usize, need: usize },
    #[error("mu too small for disjoint shifts (best clearance {0:e})")]
    ShiftsOverlap(f64),
    #[error("block not periodic: sigma*n_lambda*a_tilde is not integral")]
    NotPeriodic,
    #[error("matrix outside delta-ball: |M - Id| = {dist:e} > delta = {delta:e}")]
    OutsideBall { dist: f64, delta: f64 },
    #[error("negative gamma squared {0:e} for direction {1}")]
    NegativeGamma(f64, usize),
    #[error("insufficient samples: {0} < 10000")]
    InsufficientSamples(usize),
    #[error("inconsistent amplitude: r0 = 0 but stress is nonzero")]
    ZeroAmplitude,
    #[error("need at least three sigma values, got {0}")]
    TooFewSigmas(usize),
    #[error("{0} violated")]
    Constraint(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("input not mean-free: mean {0:e}")]
    NotMeanFree(f64),
    #[error("missing stress part: {0}")]
    MissingPart(String),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
    #[error("config not found: {0}")]
    ConfigNotFound(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
