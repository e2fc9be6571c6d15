//! Error type shared across the toolkit.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Toolkit-wide error enum. Every variant maps to a stable machine-readable
/// category string (see [`Error::category`]) that the CLI reports on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A checkpoint or spec file could not be read or understood.
    #[error("load error: {0}")]
    Load(String),

    /// The named model exists but is not a supported masked-LM family.
    #[error("unsupported model: {0}")]
    Capability(String),

    /// A prompt does not contain exactly one mask placeholder.
    #[error("prompt structure: {0}")]
    PromptStructure(String),

    /// The target word does not map to a single vocabulary id.
    #[error("target {word:?} tokenizes to {pieces} pieces; single-token targets only")]
    MultiTokenTarget { word: String, pieces: usize },

    /// A layer index outside `[0, layer_count)`.
    #[error("layer {layer} out of range for model with {layer_count} layers")]
    LayerOutOfRange { layer: usize, layer_count: usize },

    /// Adaptive selection on a map whose maximum score is not positive.
    #[error("degenerate attribution map: {0}")]
    DegenerateMap(String),

    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Brute-force ablation requested on a model above the size cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Inputs that must share a shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Filesystem failure outside of model loading.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data or result file failed to parse.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Stable category slug for machine consumption (CLI stderr, FFI codes).
    pub fn category(&self) -> &'static str {
        match self {
            Error::Load(_) => "load",
            Error::Capability(_) => "capability",
            Error::PromptStructure(_) => "prompt-structure",
            Error::MultiTokenTarget { .. } => "multi-token-target",
            Error::LayerOutOfRange { .. } => "bounds",
            Error::DegenerateMap(_) => "degenerate-map",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Capacity(_) => "capacity",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    /// Wrap a filesystem failure with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_are_stable() {
        assert_eq!(Error::Load("x".into()).category(), "load");
        assert_eq!(
            Error::MultiTokenTarget {
                word: "w".into(),
                pieces: 2
            }
            .category(),
            "multi-token-target"
        );
        assert_eq!(
            Error::LayerOutOfRange {
                layer: 9,
                layer_count: 2
            }
            .category(),
            "bounds"
        );
    }
}
