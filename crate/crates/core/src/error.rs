use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a layer) disagree on shape.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A normalization statistic over the batch needs at least two samples.
    DegenerateStatistics { layer: usize, sample_count: usize },
    /// A caller broke a documented precondition.
    Contract(String),
    /// A non-finite value appeared in the output of `layer`.
    NonFinite { layer: usize },
    /// A direction with zero norm was handed to the curvature estimate.
    ZeroDirection,
    /// The curvature estimate is zero, so the rescaled step is unbounded.
    VanishingCurvature,
    /// The checkpoint split must satisfy `0 < split < layer count`.
    InvalidSplit { split: usize, layers: usize },
    /// An invalid hyperparameter or configuration value.
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                found,
            } => write!(f, "{context}: shape mismatch, expected {expected:?}, found {found:?}"),
            Error::DegenerateStatistics { layer, sample_count } => write!(
                f,
                "layer {layer}: batch statistics need at least 2 samples, got {sample_count}"
            ),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite { layer } => write!(f, "non-finite value produced by layer {layer}"),
            Error::ZeroDirection => f.write_str("update direction has zero norm"),
            Error::VanishingCurvature => f.write_str(
                "curvature estimate vanished; the rescaled step is unbounded \
                 (enable L2 regularization with lambda > 0 to shift the curvature)",
            ),
            Error::InvalidSplit { split, layers } => {
                write!(f, "invalid checkpoint split {split} for a network of {layers} layers")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
