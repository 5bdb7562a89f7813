use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (bad config, invalid geometry, wrong lengths).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The uniformization rate does not dominate the flip rates.
    #[error("uniformization rate {lambda} is below 2 * sup rate = {required}")]
    LambdaTooSmall { lambda: f64, required: f64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("free-boundary rate table depends on exterior offset bit {bit}")]
    ExteriorDependence { bit: usize },

    #[error("{what} too large: {size} exceeds limit {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("exact dependence set exceeded cap {cap} (reached {size})")]
    CapExceeded { cap: usize, size: usize },

    #[error("rates are not attractive; {0}")]
    NotAttractive(String),

    #[error("coupling identity violated on replica {replica}: gap/2 = {half_gap}, indicator = {indicator}")]
    GapIdentity {
        replica: usize,
        half_gap: i32,
        indicator: i32,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("stream does not cover {0}")]
    Coverage(String),

    #[error("series did not converge: {0}")]
    NonConvergence(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for schema/config problems, 3 for
    /// contract violations raised while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 1,
            _ => 3,
        }
    }
}
