use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("loss is undefined: every pixel is ignored")]
    AllIgnored,
    #[error("prototype for class {class} is not initialized")]
    UninitializedClass { class: u8 },
    #[error("classes without prototypes at stage entry: {0:?}")]
    MissingClasses(Vec<u8>),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
