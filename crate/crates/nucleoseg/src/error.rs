//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the segmentation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate histogram: volume has no usable intensity contrast")]
    DegenerateHistogram,

    #[error("distance transform undefined: mask has no background voxel")]
    MaskAllForeground,

    #[error("graph construction failed: mask has no foreground voxel")]
    EmptyForeground,

    #[error("unseeded component: foreground component {component} contains no seed")]
    UnseededComponent { component: usize },

    #[error("linear solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("empty marker set: watershed needs at least one marker region")]
    EmptyMarkerSet,

    #[error("empty region for label {label}")]
    EmptyRegion { label: u32 },

    #[error("contour collapsed for label {label}")]
    ContourCollapsed { label: u32 },

    #[error("empty region pair: metric undefined on two empty voxel sets")]
    EmptyRegionPair,

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("no nuclei found: {0}")]
    NoNuclei(String),

    #[error("sphere packing infeasible after {attempts} placement attempts")]
    PackingInfeasible { attempts: usize },

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported volume format: {0}")]
    UnsupportedFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("TIFF error: {0}")]
    Tiff(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors that signal bad input data rather than misuse of the API.
    pub fn is_domain(&self) -> bool {
        match self {
            Error::DegenerateHistogram
            | Error::NoNuclei(_)
            | Error::UnseededComponent { .. }
            | Error::PackingInfeasible { .. }
            | Error::ContourCollapsed { .. } => true,
            Error::Stage { source, .. } => source.is_domain(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
