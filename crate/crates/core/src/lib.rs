//! Benchmark suite comparing three ways a robot car can learn to plan around
//! a simulated human driver: a theory-of-mind learner (inverse reward
//! learning plus nested best-response planning), black-box model-based
//! learners (a neural predictor of human plans, trained offline or
//! iteratively on-policy), and a model-free policy-gradient baseline.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`world`]: car kinematics, road geometry, initial-state sampling
//! - [`rewards`]: the five-feature reward map and its analytic gradients
//! - [`trajopt`]: quasi-Newton trajectory optimization, the human best
//!   response, implicit differentiation, nested robot planning, episodes
//! - [`human`]: the ground-truth human simulator and its seven modifications
//! - [`irl`]: demonstration generation and reward-weight recovery
//! - [`nn`]: a small dense network with manual backprop and Adam
//! - [`blackbox`]: the human-plan predictor and its training loops
//! - [`modelfree`]: a clipped-surrogate policy-gradient learner
//! - [`harness`]: sweeps, transfer experiments, CSV persistence, config

pub mod blackbox;
pub mod harness;
pub mod human;
pub mod irl;
pub mod modelfree;
pub mod nn;
pub mod rewards;
pub mod trajopt;
pub mod world;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("plan length mismatch: self {self_len}, other {other_len}")]
    PlanLengthMismatch { self_len: usize, other_len: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("dataset is unidentifiable: all feature responses are zero")]
    UnidentifiableDataset,
    #[error("degenerate best response: Hessian solve failed at damping {max_damping}")]
    DegenerateBestResponse { max_damping: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
