use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty segment: {0}")]
    EmptySegment(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("segment error: {0}")]
    Segment(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error in `{param}`: {message}")]
    Training { param: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptySegment(_) => "empty_segment",
            Error::Index(_) => "index",
            Error::Length(_) => "length",
            Error::Argument(_) => "argument",
            Error::Segment(_) => "segment",
            Error::Aggregation(_) => "aggregation",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Training { .. } => "training",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
