use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("coupler frequency undefined for bias {bias}: cos argument {arg} outside (-pi/2, pi/2)")]
    FluxOutOfRange { bias: f64, arg: f64 },

    #[error("flux map out of range at t = {t_ns} ns: {source}")]
    FluxOutOfRangeAt {
        t_ns: f64,
        #[source]
        source: Box<SimError>,
    },

    #[error("labeling failed for state {label}: {reason}")]
    Labeling { label: String, reason: String },

    #[error("label tracking lost near omegaC = {last_good_ghz} GHz")]
    TrackingLost { last_good_ghz: f64 },

    #[error("scheduling conflict: {0}")]
    Schedule(String),

    #[error("near-degenerate pair {m} / {n}: gap {gap} rad/ns")]
    Divergence { m: String, n: String, gap: f64 },

    #[error("integration instability: minimum eigenvalue {min_eig:e}; try a smaller step")]
    Instability { min_eig: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("leakage: diagonal magnitude {magnitude} at index {index} is not phase-like")]
    Leakage { index: usize, magnitude: f64 },

    #[error("fit quality: {0}")]
    FitQuality(String),

    #[error("reconstruction: {0}")]
    Reconstruction(String),

    #[error("singular: {0}")]
    Singular(String),

    #[error("table range: {0}")]
    Extrapolation(String),

    #[error("linear algebra: {0}")]
    Linalg(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl SimError {
    /// Variant name, stable across releases; used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            SimError::InvalidDimension(_) => "InvalidDimension",
            SimError::InvalidParameter(_) => "InvalidParameter",
            SimError::FluxOutOfRange { .. } => "FluxOutOfRange",
            SimError::FluxOutOfRangeAt { .. } => "FluxOutOfRangeAt",
            SimError::Labeling { .. } => "Labeling",
            SimError::TrackingLost { .. } => "TrackingLost",
            SimError::Schedule(_) => "Schedule",
            SimError::Divergence { .. } => "Divergence",
            SimError::Instability { .. } => "Instability",
            SimError::Calibration(_) => "Calibration",
            SimError::Leakage { .. } => "Leakage",
            SimError::FitQuality(_) => "FitQuality",
            SimError::Reconstruction(_) => "Reconstruction",
            SimError::Singular(_) => "Singular",
            SimError::Extrapolation(_) => "Extrapolation",
            SimError::Linalg(_) => "Linalg",
            SimError::Io(_) => "Io",
            SimError::Parse(_) => "Parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

impl From<ndarray_linalg::error::LinalgError> for SimError {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        SimError::Linalg(e.to_string())
    }
}

impl From<toml::de::Error> for SimError {
    fn from(e: toml::de::Error) -> Self {
        SimError::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for SimError {
    fn from(e: toml::ser::Error) -> Self {
        SimError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for SimError {
    fn from(e: serde_json::Error) -> Self {
        SimError::Parse(e.to_string())
    }
}

impl From<csv::Error> for SimError {
    fn from(e: csv::Error) -> Self {
        SimError::Parse(e.to_string())
    }
}
