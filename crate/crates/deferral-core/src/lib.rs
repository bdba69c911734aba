//! Offline learning of complementary decision policies and human-AI routing
//! from logged bandit feedback.
//!
//! The crate covers the full pipeline: domain types for logged decisions and
//! counterfactual evaluation ([`dataset`]), differentiable softmax policies
//! with closed-form gradients ([`models`]), counterfactual value objectives
//! ([`estimators`]), behavior-policy estimation ([`propensity`]), simulated
//! human decision-makers ([`hbm`]), synthetic experiment worlds ([`datagen`]),
//! out-of-distribution gating ([`ood`]), training orchestration
//! ([`training`]), and an experiment runner with significance testing
//! ([`harness`]).

pub mod dataset;
pub mod datagen;
pub mod estimators;
pub mod harness;
pub mod hbm;
pub mod io;
pub mod models;
pub mod ood;
pub mod propensity;
pub mod rng;
pub mod stats;
pub mod training;

pub use dataset::{
    ActionSpace, BanditLog, BanditRecord, CostFunction, CounterfactualTable, DataError,
    FeatureVector, SplitData,
};
pub use estimators::{DeterministicSupportMask, ObjectiveValue, PolicyProbs};
pub use harness::{evaluate_team, run_experiment, EvalOutcome, ExperimentConfig, ExperimentResult};
pub use models::{Activation, AdamParams, AdamState, Architecture, ModelError, SoftmaxModel};
pub use rng::Seed;
pub use training::{Decision, DeferralSystem, HumanChoice, Method, Router, TrainConfig};
