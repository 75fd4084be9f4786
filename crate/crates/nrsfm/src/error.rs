//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Jacobi SVD ran out of sweeps. Carries the offending input so callers
    /// can dump it for post-mortems.
    #[error("SVD did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    SvdNonConvergence {
        sweeps: usize,
        rows: usize,
        cols: usize,
        input: Vec<f64>,
    },

    #[error("degenerate camera: sigma_min {sigma_min:.3e} below {sigma_max:.3e} * 1e-12")]
    DegenerateCamera { sigma_min: f64, sigma_max: f64 },

    #[error("iteration diverged at step {iteration} (|z|_inf exceeded 1e12)")]
    Divergence { iteration: usize },

    #[error("ill-posed dictionary: column {column} has zero norm")]
    IllPosedDictionary { column: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("gradient instability: singular value sum {sigma_sum:.3e} below 1e-10")]
    GradientInstability { sigma_sum: f64 },

    #[error("non-finite gradient in {field}; step rejected")]
    PoisonedStep { field: String },

    #[error("training collapsed: {steps} consecutive steps without a finite loss")]
    TrainingCollapse {
        steps: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("frame {frame} has {visible} visible points, need at least 3")]
    InsufficientObservations { frame: usize, visible: usize },

    #[error("empty checkpoint history")]
    EmptyHistory,

    #[error("insufficient data: need at least {need} points, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("degenerate alignment: ground-truth shape has zero norm")]
    DegenerateAlignment,

    #[error("track set carries no ground truth")]
    MissingGroundTruth,

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
