use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// `Degenerate` is the recoverable family: samplers and the training loop
/// treat it as "draw a fresh episode" rather than a hard failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask: cannot pool over zero cells")]
    EmptyMask,
    #[error("degenerate episode: {0}")]
    Degenerate(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("internal invariant broken: {0}")]
    Invariant(String),
    #[error("sampling gave up after {0} attempts")]
    SamplingExhausted(usize),
    #[error("class {0} was never evaluated")]
    Unevaluated(usize),
}

impl Error {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::EmptyMask)
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
