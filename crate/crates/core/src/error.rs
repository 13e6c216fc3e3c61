use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes}")]
    ShapeMismatch { op: &'static str, shapes: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: graph already consumed")]
    GraphConsumed,
    #[error("adam: non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("unknown paraphrase class {0}")]
    UnknownClass(usize),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}
