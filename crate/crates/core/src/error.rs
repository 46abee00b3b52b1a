use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("malformed RLE: {0}")]
    MalformedRle(String),

    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },

    #[error("region mask `{0}` has no true pixels")]
    EmptyMask(String),

    #[error("invalid blur kernel {0}: must be odd and >= 3")]
    InvalidKernel(u32),

    #[error("invalid action chunk: {0}")]
    InvalidChunk(String),

    #[error("chunk shape mismatch: {0}")]
    ChunkShape(String),

    #[error("action horizon T_a = 0 cannot use the literal divisor")]
    DegenerateHorizon,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backend unavailable ({context}): {reason}")]
    BackendUnavailable { context: String, reason: String },

    #[error("protocol error: {message}")]
    Protocol { message: String, payload: String },

    #[error("could not parse region proposal from backend output")]
    ProposalParse { raw: String },

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("attribution shape error: {0}")]
    Shape(String),

    #[error("attribution map is flat (max == min)")]
    FlatAttribution,

    #[error("fixture missing: {0}")]
    FixtureMissing(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("episode aborted: {0}")]
    EpisodeAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Codec(String),
}

impl Error {
    pub fn backend(context: impl Into<String>, reason: impl std::fmt::Display) -> Self {
        Error::BackendUnavailable {
            context: context.into(),
            reason: reason.to_string(),
        }
    }

    pub fn protocol(message: impl Into<String>, payload: impl Into<String>) -> Self {
        Error::Protocol {
            message: message.into(),
            payload: payload.into(),
        }
    }

    /// Short machine-readable name, used in CLI error JSON and wire `error_resp` codes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidImage(_) => "invalid_image",
            Error::MalformedRle(_) => "malformed_rle",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::EmptyMask(_) => "empty_mask",
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::InvalidChunk(_) => "invalid_chunk",
            Error::ChunkShape(_) => "chunk_shape",
            Error::DegenerateHorizon => "degenerate_horizon",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BackendUnavailable { .. } => "backend_unavailable",
            Error::Protocol { .. } => "protocol",
            Error::ProposalParse { .. } => "proposal_parse",
            Error::EmptyCalibrationSet => "empty_calibration_set",
            Error::Shape(_) => "shape",
            Error::FlatAttribution => "flat_attribution",
            Error::FixtureMissing(_) => "fixture_missing",
            Error::Scene(_) => "scene",
            Error::EpisodeAborted(_) => "episode_aborted",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Codec(_) => "codec",
        }
    }
}
