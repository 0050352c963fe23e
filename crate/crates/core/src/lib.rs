//! Incremental (continual) learning on task streams.
//!
//! The crate trains a small ReLU MLP on a sequence of disjoint-label tasks and
//! counters forgetting with quadratic anchor penalties:
//!
//! - [`fisher`]: diagonal empirical Fisher and its moving-average (EWC++) update,
//! - [`importance`]: path-based parameter importance accumulated during training,
//! - [`regularizers`]: vanilla / EWC++ / PI / RWalk anchors,
//! - [`memory`]: exemplar replay with uniform, plane-distance, entropy and
//!   mean-of-features selection,
//! - [`metrics`]: average accuracy, forgetting, intransigence,
//! - [`harness`]: the end-to-end protocol, reference models and run outputs.

pub mod data;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod importance;
mod linalg;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod regularizers;

pub use data::{Dataset, Split, SyntheticSpec, TaskSpec, TaskStream};
pub use error::{Error, Result};
pub use fisher::{FisherDiag, FisherMode, FisherProvenance};
pub use harness::{ExperimentConfig, HeadMode, RunResult};
pub use importance::{Normalization, ScoreState};
pub use memory::{EpisodicMemory, Sampler};
pub use metrics::{AccuracyMatrix, ReferenceAccuracies};
pub use nn::{Batch, ForwardCache, Init, Label, ModelParams};
pub use optim::{AdamConfig, AdamState};
pub use regularizers::{Method, PenaltyAnchor};
