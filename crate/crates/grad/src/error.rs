use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value {value} while evaluating parameter `{param}` element {index}")]
    NonFinite {
        param: String,
        index: usize,
        value: f64,
    },
}

pub type Result<T> = std::result::Result<T, GradError>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GradError {
    GradError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
