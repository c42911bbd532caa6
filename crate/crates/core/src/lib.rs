//! Multi-channel side-channel attack toolkit.
//!
//! The crate covers the full attack chain on simulated leakage traces:
//!
//! * [`trace`] — trace/trace-set types and the binary on-disk format
//! * [`sim`] — deterministic multi-channel leakage simulator
//! * [`preprocess`] — time-diversity averaging, z-score, POI selection
//! * [`profiling`] — leakage profiles and the profiled correlation attack
//! * [`fusion`] — data fusion and decision fusion across channels
//! * [`evaluation`] — key rank, guessing entropy, greedy diversity search
//! * [`sweep`] — seeded Monte-Carlo evaluation harness
//!
//! Everything downstream of a seed is deterministic: identical seeds give
//! bit-identical traces, scores, and result files, independent of thread
//! count.

pub mod evaluation;
pub mod fusion;
pub mod preprocess;
pub mod profiling;
pub mod rng;
pub mod sim;
pub mod sweep;
pub mod trace;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// File does not start with the trace-set magic.
    #[error("bad magic: expected \"SCRM\", found {0:02x?}")]
    BadMagic([u8; 4]),

    /// Trace-set format version not understood by this build.
    #[error("unsupported trace-set version {0}")]
    VersionMismatch(u16),

    /// File ended before the payload declared in the header.
    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    /// An invariant or configuration constraint was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Inputs that must agree (plaintexts, byte coverage, channels) do not.
    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    /// Statistically degenerate input (constant values, zero variance,
    /// too few classes).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A text artifact (CSV, sidecar) could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    fn mismatch(msg: impl Into<String>) -> Self {
        Error::Mismatch(msg.into())
    }

    fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
