use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error in {what}: {detail}")]
    Domain { what: &'static str, detail: String },

    /// A parameter is inconsistent with the operation's preconditions.
    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    /// An exponent exceeded the overflow guard.
    #[error("overflow guard: exponent {exponent} exceeds {limit} in {what}")]
    Overflow {
        what: &'static str,
        exponent: f64,
        limit: f64,
    },

    /// A requested computation does not fit the size budget.
    #[error("infeasible size in {what}: {detail}")]
    Infeasible { what: &'static str, detail: String },

    /// A bound is vacuous for the requested parameters.
    #[error("vacuous bound: {0}")]
    Vacuous(String),
}

impl Error {
    pub(crate) fn domain(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }
}
