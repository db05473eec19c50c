//! Core of the mbsgd laboratory: numerics, models, solver, data sharding,
//! allreduce collectives and the synchronous data-parallel training engine.

pub mod collectives;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod models;
pub mod numerics;
pub mod solver;
pub mod verify;

pub use collectives::{Algorithm, CostModel, Topology, TrafficReport, TransportKind};
pub use config::{ExperimentConfig, Seeds};
pub use cost::{cost_report, CostQuery, CostReport, Verdict};
pub use engine::{
    effective_solver, loss_normalizer, train, EngineConfig, ExecMode, Pitfall, TrainRecord,
    TrainRow, TrainSetup,
};
pub use error::{Error, Result};
pub use models::{Batch, LossKind, Model, ModelSpec};
pub use numerics::Tensor;
pub use solver::SolverConfig;
