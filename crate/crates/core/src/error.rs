use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Each variant maps onto one of the CLI exit codes through [`ConsultError::exit_code`].
#[derive(Debug, Error)]
pub enum ConsultError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("no foreground found")]
    NoForeground,
    #[error("brain region too small: {0}")]
    RegionTooSmall(String),
    #[error("defect vanished at feature resolution")]
    DefectVanished,
    #[error("bank fingerprint does not match the extractor weights and config")]
    FingerprintMismatch,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("access audit violation: {0}")]
    AuditViolation(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<ConsultError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ConsultError> = std::result::Result<T, E>;

impl ConsultError {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ConsultError::InvalidArgument(_)
            | ConsultError::Config(_)
            | ConsultError::FingerprintMismatch
            | ConsultError::Json(_) => 2,
            ConsultError::Numerical(_) => 4,
            ConsultError::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> ConsultError {
        match self {
            e @ ConsultError::Stage { .. } => e,
            e => ConsultError::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
