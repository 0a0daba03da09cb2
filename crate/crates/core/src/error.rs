use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by operation #{op_index} ({op})")]
    NonFinite { op_index: usize, op: &'static str },

    #[error("non-finite intermediate at diffusion step {step}")]
    NonFiniteStep { step: usize },

    #[error("client {client}: non-finite loss at batch {batch}")]
    ClientDiverged { client: usize, batch: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded 10x the initial loss {initial} for 100 consecutive steps")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("latent code was extracted with a different noise schedule")]
    ScheduleMismatch,

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("server has no trained estimator")]
    NotTrained,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }
}
