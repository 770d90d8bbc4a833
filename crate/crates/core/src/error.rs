use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("duplicate cell_id `{cell_id}` at line {line}")]
    DuplicateCellId { cell_id: String, line: usize },

    #[error("record `{cell_id}` is missing a phase-contrast path")]
    MissingPhaseContrast { cell_id: String },

    #[error("record `{cell_id}` has an empty patient_id")]
    EmptyPatientId { cell_id: String },

    #[error("pixel_scale_um must be positive, got {0}")]
    InvalidPixelScale(f64),

    #[error("invalid validation patient count {requested}: manifest has {available} patients")]
    InvalidSplitCount { requested: usize, available: usize },

    #[error("segmentation found no component of at least {min_area_px} px")]
    NoComponentFound { min_area_px: usize },

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("metric input error: {0}")]
    MetricInput(String),

    #[error("roc requires both classes present")]
    SingleClassRoc,

    #[error("no cells carry both annotation rounds `{round_a}` and `{round_b}`")]
    NoAnnotationOverlap { round_a: String, round_b: String },

    #[error("no patients have non-null annotations in both rounds")]
    NoCommonPatients,

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error("invalid synthesis config: {0}")]
    InvalidSynthConfig(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
