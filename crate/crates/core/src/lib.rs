//! Group-robust training under subpopulation shift.
//!
//! The crate generates synthetic datasets whose training split pairs each
//! label with a spurious attribute that is easier to learn than the label's
//! own signal, trains small classifiers on them with ERM, GroupDRO and
//! curriculum-staged GroupDRO, and evaluates worst-group accuracy.
//!
//! * [`data`]: dataset generation and bias-confirming/conflicting splits
//! * [`model`]: linear and one-hidden-layer classifiers with exact gradients
//! * [`dro`], [`sampler`]: training loops, group reweighting, batch samplers
//! * [`curriculum`]: staged training driven by a warmup model's losses
//! * [`metrics`]: group-wise evaluation and model selection
//! * [`methods`], [`harness`]: method dispatch, sweeps, tables and CSV output

pub mod curriculum;
pub mod data;
pub mod dro;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod seed;

pub use curriculum::{CurriculumSchedule, SplitSource, Variant};
pub use data::{generate, ground_truth_split, DataConfig, Dataset, Split, Splits};
pub use dro::{groupdro_update, GroupWeights, TrainConfig, TrainLog};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use methods::{run_method, Method, ModelSpec, RunOutput, RunSettings};
pub use metrics::{evaluate, GroupMetrics};
pub use model::{Architecture, Batch, Model, ModelKind};
