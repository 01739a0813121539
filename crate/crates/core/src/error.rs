use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bias-conflicting set is empty")]
    EmptyConflicting,

    #[error("bias-confirming set is empty")]
    EmptyConfirming,

    #[error(
        "curriculum stage 1 selects no samples: rate {rate} is too small for \
         {n_conflicting} bias-conflicting samples (minimum viable rate {min_rate})"
    )]
    EmptyStage {
        rate: f64,
        n_conflicting: usize,
        min_rate: f64,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("group weight normalizer is {0}")]
    DegenerateWeights(f64),

    #[error("run failed for seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
