use std::io;
use std::path::PathBuf;

/// Failures reading or writing the binary and text formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        expected: &'static str,
        found: String,
        offset: usize,
    },
    #[error("truncated {what} at offset {offset}: need {needed} more bytes")]
    Truncated {
        what: &'static str,
        offset: usize,
        needed: usize,
    },
    #[error("extents {extents:?} overflow the addressable size")]
    ExtentOverflow { extents: Vec<u64> },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("unsupported {what} version {version}")]
    Version { what: &'static str, version: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] fcspn_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> FormatError {
    let path = path.into();
    move |source| FormatError::Io { path, source }
}
