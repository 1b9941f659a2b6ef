use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside fixed-point range (|x| < {limit}, frac_bits = {frac_bits})")]
    EncodeRange { value: f64, limit: f64, frac_bits: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("correlated randomness exhausted: {0}")]
    Exhausted(String),

    #[error("correlated randomness batch {0} was already consumed")]
    Reuse(u64),

    #[error("protocol desync: {0}")]
    Desync(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("malformed frame: {0}")]
    Frame(String),

    #[error("{kernel}: input outside convergence domain ({detail})")]
    Domain { kernel: &'static str, detail: String },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("privacy audit failed: {0}")]
    Audit(String),

    #[error("operator graph contains a cycle")]
    Cycle,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used for process exit codes and FFI error codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Protocol,
    Numeric,
    Training,
    Privacy,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Protocol => 4,
            Category::Numeric => 5,
            Category::Training => 6,
            Category::Privacy => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Io => "io",
            Category::Protocol => "protocol",
            Category::Numeric => "numeric",
            Category::Training => "training",
            Category::Privacy => "privacy",
        }
    }
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Cycle => Category::Config,
            Error::Io(_) | Error::Format(_) => Category::Io,
            Error::Exhausted(_) | Error::Reuse(_) | Error::Desync(_) | Error::Transport(_) | Error::Frame(_) => {
                Category::Protocol
            }
            Error::EncodeRange { .. } | Error::Domain { .. } => Category::Numeric,
            Error::Training(_) => Category::Training,
            Error::Audit(_) => Category::Privacy,
        }
    }
}
