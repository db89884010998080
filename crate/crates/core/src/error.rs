use thiserror::Error;

use crate::expr::{EvalError, ParseError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid system definition: {0}")]
    Config(String),
    #[error("invalid regularization: {0}")]
    InvalidRegularization(String),
    #[error("regularization evaluated at negative argument s = {0}")]
    NegativeArgument(f64),
    #[error("the zero vector has no direction")]
    ZeroVector,
    #[error("no critical set: |target| = {0} is not below 1")]
    NoCriticalSet(f64),
    #[error("matrix A(z) is singular at z = {0:?}")]
    SingularMatrix(Vec<f64>),
    #[error("crossing regime: no critical point at z = {0:?}")]
    Crossing(Vec<f64>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
