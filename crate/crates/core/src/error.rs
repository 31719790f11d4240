use std::path::PathBuf;

/// Errors raised by the pipeline stages.
///
/// Variants map onto the failure categories that the cohort census reports, see
/// [`Error::census_reason`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated voxel payload: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("non-finite voxel value in channel `{0}`")]
    NonFinite(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("affine is singular")]
    SingularAffine,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("channel `{0}` not found or of the wrong kind")]
    ChannelKind(String),
    #[error("mask is empty")]
    EmptyMask,

    #[error("expected 6 Dixon series, found {0}")]
    MissingSeries(usize),
    #[error("non-standard Dixon acquisition with {0} series")]
    NonStandardAcquisition(usize),
    #[error("Dixon series {series} lacks the `{channel}` channel")]
    MissingChannel { series: String, channel: String },
    #[error("adjacent Dixon series {upper} and {lower} do not overlap")]
    NoOverlap { upper: String, lower: String },

    #[error("no body profile found in series")]
    DegenerateProfile,
    #[error("body mask is empty")]
    EmptyBody,
    #[error("atlas bank is empty")]
    EmptyBank,
    #[error("crop clipped by the field of view ({clipped:.0}% outside)")]
    CropOutOfBounds { clipped: f64 },

    #[error("at least {required} echoes required, found {found}")]
    InsufficientEchoes { required: usize, found: usize },
    #[error("acquisition is not axial: {0}")]
    NonAxialAcquisition(String),
    #[error("echo {0} contains non-finite samples")]
    CorruptEcho(usize),
    #[error("negative R2* value {0}")]
    NegativeR2star(f64),
    #[error("degenerate regression design: {0}")]
    DegenerateDesign(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no recognized acquisition under {0}")]
    NoRecognizedInput(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure taxonomy used in subject records and cohort tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    MissingSeries,
    MissingChannel,
    NonStandard,
    Corrupt,
    Other,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn census_reason(&self) -> FailureReason {
        match self {
            Error::MissingSeries(_) => FailureReason::MissingSeries,
            Error::MissingChannel { .. } => FailureReason::MissingChannel,
            Error::NonStandardAcquisition(_) | Error::NonAxialAcquisition(_) => FailureReason::NonStandard,
            Error::MalformedHeader(_)
            | Error::UnsupportedDatatype(_)
            | Error::TruncatedData { .. }
            | Error::NonFinite(_)
            | Error::CorruptEcho(_)
            | Error::Json { .. } => FailureReason::Corrupt,
            _ => FailureReason::Other,
        }
    }
}
