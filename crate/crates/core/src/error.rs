use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} is too small (need p >= 3)")]
    TooSmall(u64),
    #[error("modulus {0} is too large (need p < 2^31)")]
    TooLarge(u64),
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("degenerate affine map: y1 == y2")]
    DegenerateMap,
    #[error("operands live in different fields (p = {0} vs p = {1})")]
    ModulusMismatch(u64, u64),

    #[error("points coincide")]
    CoincidentPoints,
    #[error("zero vector is not a projective point or line")]
    ZeroVector,
    #[error("matrix is singular")]
    SingularMatrix,

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point set is not a square Cartesian product")]
    NotCartesian,

    #[error("cannot dilate by zero")]
    ZeroDilate,
    #[error("set contains zero, which has no inverse")]
    ZeroElement,
    #[error("set too small: need at least {needed} elements, got {got}")]
    SetTooSmall { needed: usize, got: usize },
    #[error("exhaustive search too large: size {size} exceeds limit {limit}")]
    SearchTooLarge { size: usize, limit: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("hypothesis violated: {distinct} distinct sums on the edge set, limit {limit}")]
    HypothesisViolated { distinct: usize, limit: usize },

    #[error("slope parameter {0} does not come from any y3 outside {{0, 1}}")]
    BadSlope(u64),

    #[error("requested {n} elements but the field only has {p}")]
    SizeExceedsField { n: usize, p: u64 },
    #[error("subgroup order {order} does not divide p - 1 = {}", p - 1)]
    BadSubgroupOrder { order: u64, p: u64 },
    #[error("could not generate {0}")]
    Generation(String),

    #[error("record schema mismatch: found {found}, expected {expected}")]
    SchemaMismatch { found: String, expected: u32 },
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
