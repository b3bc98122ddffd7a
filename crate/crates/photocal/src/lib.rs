//! Sequential photometric calibration for image sequences with exposure
//! metadata.
//!
//! Joint photometric estimation carries a gamma-family ambiguity that can
//! only be broken with ground-truth knowledge of the response. This crate
//! instead estimates the three unknowns one after another, leaning on the
//! exposure values recorded by the camera:
//!
//! 1. **Inverse response** from consecutive frame pairs with a large
//!    exposure change and correspondences with small radial motion
//!    ([`response`]), solved as an equality-constrained quadratic.
//! 2. **Vignette** from offset frame pairs with large radial motion,
//!    using the estimated response and metadata ratios ([`vignette`]),
//!    solved by (robust) least squares.
//! 3. **Exposure ratios** re-estimated from the calibrated intensities to
//!    validate both stages against the metadata ([`exposure`]).
//!
//! [`sim`] provides a forward image-formation simulator with exact ground
//! truth for verifying the whole chain, [`pipeline`] orchestrates the
//! windowed scan over a sequence, and [`dataset`] reads and writes the
//! on-disk layout (images/, times.txt, pcalib.txt, vignette.png).

pub mod dataset;
pub mod exposure;
pub mod matching;
pub mod pipeline;
pub mod response;
pub mod sim;
pub mod solver;
pub mod vignette;

pub use dataset::{FrameRecord, ResponseCurve, Sequence, VignetteImage};
pub use exposure::{ValidationReport, ValidationStage};
pub use matching::{Match, MatchSet, MatcherConfig};
pub use response::{CrfPairGate, InverseResponse};
pub use sim::{SimConfig, SimGroundTruth};
pub use solver::SolverKind;
pub use vignette::{VignetteModel, VignettePairing};

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    InvalidData { path: PathBuf, msg: String },
    #[error("empty sequence: {path} lists no frames")]
    EmptySequence { path: PathBuf },
    #[error("missing image for frame {id}: {path}")]
    MissingImage { id: u32, path: PathBuf },
    #[error("frame {id}: exposure must be positive, got {value}")]
    NonPositiveExposure { id: u32, value: f64 },
    #[error("duplicate frame id {id}")]
    DuplicateFrameId { id: u32 },
    #[error("dimension mismatch ({context}): expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        got: (u32, u32),
        context: String,
    },
    #[error("expected 256 values, found {found}")]
    ValueCount { found: usize },
    #[error("response not invertible")]
    NotInvertible,
    #[error("no usable matches for exposure estimation")]
    NoUsableMatches,
    #[error("calibration failed validation: no estimate passed the exposure check")]
    ValidationFailed,
    #[error("{what} not estimable: {reason}")]
    NotEstimable { what: &'static str, reason: String },
    #[error("motion leaves the radiance map at frame {frame}")]
    MotionOutOfBounds { frame: usize },
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
