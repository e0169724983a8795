use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{stage} has not been run: {hint}")]
    MissingArtifact { stage: String, hint: String },

    #[error(
        "{stage} outputs are stale (built for config {found}, current config is {expected}); rerun `civic-lens {stage}`"
    )]
    StaleArtifact {
        stage: String,
        found: String,
        expected: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("runs directory {0} is locked by another civic-lens process")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] civic_lens::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn missing(stage: &str, hint: impl Into<String>) -> Self {
        CliError::MissingArtifact {
            stage: stage.to_string(),
            hint: hint.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        use civic_lens::Error as E;
        match self {
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::StaleArtifact { .. } => "stale_artifact",
            CliError::Config(_) => "config",
            CliError::Locked(_) => "locked",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::Parse { .. } | E::Json(_) | E::Csv(_) => "parse",
                E::EmptyDataset | E::Stratification { .. } | E::EmptyVocabulary => "data",
                E::DuplicateUser(_) | E::UnknownLabel(_) => "data",
                E::InvalidArgument(_) | E::DimensionMismatch { .. } => "invalid_argument",
                E::NonFiniteLoss { .. } => "non_finite_loss",
                E::NotDifferentiable(_) => "not_differentiable",
                E::VocabularyMismatch { .. } => "vocabulary_mismatch",
                E::Unsupported(_) => "unsupported",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::StaleArtifact { .. } => 4,
            CliError::Locked(_) => 5,
            _ => 1,
        }
    }
}
