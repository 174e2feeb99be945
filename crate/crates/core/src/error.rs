use alloc::string::String;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input or intermediate value was NaN or infinite.
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    /// Two vectors (or a vector and a model) disagree on dimension.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A robust aggregation rule was called outside its feasible regime.
    #[error("{rule} infeasible with n = {n}, f = {f}")]
    Infeasible { rule: &'static str, n: usize, f: usize },

    /// The device holds no examples; the caller should resample.
    #[error("device {device} has no local data")]
    EmptyDevice { device: usize },

    /// The attack cannot be mounted in this round (e.g. zero learning rate).
    #[error("attack infeasible: {0}")]
    AttackInfeasible(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
