use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is not attached to the gradient tape")]
    Detached,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("model function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: u32, vocab: usize },

    #[error("reference is empty; error rate undefined")]
    EmptyReference,

    #[error("cpWER supports at most {max} speakers per side, got {got}")]
    TooManySpeakers { got: usize, max: usize },

    #[error("non-finite loss at step {step}: loss={loss} l_am={l_am} l_fm={l_fm}")]
    NonFiniteLoss { step: usize, loss: f32, l_am: f32, l_fm: f32 },

    #[error("checkpoint format error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
