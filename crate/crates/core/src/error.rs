use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied inconsistent or out-of-range arguments.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A keypoint landed at or behind the camera's minimum depth.
    #[error("keypoint {index} has depth {depth:.6} <= {epsilon}")]
    Domain { index: usize, depth: f64, epsilon: f64 },

    /// A document violates a structural invariant; `field` names the offender.
    #[error("invalid field `{field}`: {reason}")]
    Invariant { field: String, reason: String },

    /// A document could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A stored file is truncated or its checksum does not match.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Not enough visible keypoints to fit a pose.
    #[error("underdetermined: {visible} visible keypoints, need at least {required}")]
    Underdetermined { visible: usize, required: usize },

    /// Sampling or experiment configuration cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// A metric is undefined for the given input.
    #[error("metric error: {0}")]
    Metric(String),

    /// A required input file does not exist.
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
