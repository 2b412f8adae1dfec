use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped into configuration, I/O and data failures so the CLI
/// can map them onto distinct exit codes (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error in layer `{layer}`: {message}")]
    LayerConfig { layer: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph parse error at line {line}: {message}")]
    GraphParse { line: usize, message: String },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("unresolved weight reference `{0}`")]
    UnresolvedWeight(String),

    #[error("unresolved layer input `{input}` in layer `{layer}`")]
    UnresolvedInput { layer: String, input: String },

    #[error("graph contains a cycle through layer `{0}`")]
    Cycle(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("{0} trailing bytes after last record")]
    TrailingData(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("peak ({y}, {x}) outside map of size {height}x{width}")]
    PeakOutOfBounds {
        y: usize,
        x: usize,
        height: usize,
        width: usize,
    },

    #[error("no pixel reaches the threshold {tau}")]
    EmptyRegion { tau: f32 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn layer(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::LayerConfig {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration, 3 for I/O, 4 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::LayerConfig { .. }
            | Error::Config(_)
            | Error::GraphParse { .. }
            | Error::UnknownLayerKind(_)
            | Error::UnresolvedWeight(_)
            | Error::UnresolvedInput { .. }
            | Error::Cycle(_)
            | Error::UnknownLayer(_) => 2,
            Error::Io { .. } => 3,
            _ => 4,
        }
    }
}
