//! Crate-wide error type.

/// Errors produced by transforms, quantization, the cache, and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("hadamard order 2^{0} exceeds the supported maximum 2^16")]
    HadamardTooLarge(u32),

    #[error("calibration requires at least one sample row")]
    EmptyCalibration,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("insufficient training data: {points} sub-vectors for {centroids} centroids")]
    InsufficientData { points: usize, centroids: usize },

    #[error("corrupt code {code} at row {row}, sub-vector {sub}: must be < {limit}")]
    CorruptCode {
        row: usize,
        sub: usize,
        code: u32,
        limit: u32,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("accounting mismatch: {0}")]
    AccountingMismatch(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
