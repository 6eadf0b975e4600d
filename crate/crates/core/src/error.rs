use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// The oracle refused a query because its budget is spent. Attacks that
    /// hit this stop and return whatever trace they accumulated.
    #[error("query budget exhausted ({used} of {limit} queries used)")]
    BudgetExhausted { used: u64, limit: u64 },

    /// A remote oracle request failed before reaching the model. Does not
    /// consume budget.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("no adversarial starting point found after {0} random draws")]
    InitFailed(usize),

    #[error("model is not differentiable")]
    NotDifferentiable,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, Error::BudgetExhausted { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
