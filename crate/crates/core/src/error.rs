use std::path::PathBuf;

/// Pipeline stage that produced an [`Error::Stage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Sampling,
    Encoding,
    Depth,
    Prompt,
    Inversion,
    Denoising,
    Decoding,
    Output,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Sampling => "frame-sampling",
            Stage::Encoding => "encoding",
            Stage::Depth => "depth",
            Stage::Prompt => "prompt",
            Stage::Inversion => "inversion",
            Stage::Denoising => "denoising",
            Stage::Decoding => "decoding",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("step index {index} out of range 1..={max}")]
    StepOutOfRange { index: usize, max: usize },

    #[error("frame index {index} out of range 1..={frames}")]
    FrameOutOfRange { index: usize, frames: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("invalid record: {0}")]
    Record(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Io,
}

impl Error {
    pub fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Schedule(_) => ErrorKind::Config,
            Error::Io { .. } | Error::Image { .. } | Error::Manifest { .. } => ErrorKind::Io,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Backend,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attach a pipeline stage to a fallible result.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
