use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid state: {0}")]
    State(&'static str),

    /// A gradient or weight stopped being finite during training.
    #[error("non-finite {what} at step {step}, index {index} (value {value})")]
    NonFinite {
        what: &'static str,
        step: u64,
        index: usize,
        value: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid attack parameter: {0}")]
    Param(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
