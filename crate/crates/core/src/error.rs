use thiserror::Error;

/// Errors raised by grid construction, the solvers and the risk evaluators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "time step {dt:e} exceeds cfl_max_dt = {max_dt:e} (h = {h:e}, sigma = {sigma}, a_max = {a_max})"
    )]
    Cfl {
        dt: f64,
        max_dt: f64,
        h: f64,
        sigma: f64,
        a_max: f64,
    },

    #[error("kernel mode error: {0}")]
    Mode(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
