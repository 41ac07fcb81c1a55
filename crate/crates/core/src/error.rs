use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ScaleTooSmall: resized image {width}x{height} is below the {minimum}px encoder minimum")]
    ScaleTooSmall {
        width: usize,
        height: usize,
        minimum: usize,
    },
    #[error("NonFiniteActivation: encoder produced a non-finite value")]
    NonFiniteActivation,
    #[error("AllScalesSkipped: no scale produced a usable image")]
    AllScalesSkipped,
    #[error("DegenerateColumn: attention column {column} sums to zero (iteration {iteration})")]
    DegenerateColumn { iteration: usize, column: usize },
    #[error("ZeroFeature: super-feature {0} has zero magnitude after whitening")]
    ZeroFeature(usize),
    #[error("ZeroDescriptor: aggregated global descriptor has zero norm")]
    ZeroDescriptor,
    #[error("ZeroAttentionColumn: attention map {0} has zero norm")]
    ZeroAttentionColumn(usize),
    #[error("RankDeficient: covariance rank {rank} is below the {required} required output dims")]
    RankDeficient { rank: usize, required: usize },
    #[error("PoolTooSmall: {available} valid negatives available, {required} requested")]
    PoolTooSmall { available: usize, required: usize },
    #[error("DivergenceDetected: non-finite total loss at epoch {epoch}, batch {batch}")]
    DivergenceDetected { epoch: usize, batch: usize },
    #[error("NoFeatures: image {0} contributed no features")]
    NoFeatures(String),
    #[error("IndexEmpty: no image could be indexed")]
    IndexEmpty,
    #[error("NoRelevant: query {0} has no relevant images")]
    NoRelevant(String),
    #[error("KTooLarge: K={k} needs more than {set_size} features")]
    KTooLarge { k: usize, set_size: usize },
    #[error("IdOutOfRange: super-feature id {id} (set has {count})")]
    IdOutOfRange { id: usize, count: usize },
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
    #[error("ConfigError: {key}: {message}")]
    Config { key: String, message: String },
    #[error("MissingArtifact: {0} not found (run the producing command first)")]
    MissingArtifact(std::path::PathBuf),
    #[error("FormatError: {0}")]
    Format(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ImageError: {0}")]
    Image(#[from] image::ImageError),
    #[error("JsonError: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
