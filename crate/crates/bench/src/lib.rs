//! Fixtures shared by the criterion benches.

use mbsgd_core::data::{Dataset, EpochPlan};
use mbsgd_core::engine::Engine;
use mbsgd_core::{ExecMode, ExperimentConfig, Result};

pub use mbsgd_core::collectives::bench::integer_buffers;

/// An engine on the default toy experiment, ready to step through epoch 0.
pub struct StepFixture {
    pub engine: Engine,
    pub data: Dataset,
    pub plan: EpochPlan,
    pub iters_per_epoch: usize,
}

impl StepFixture {
    pub fn new(mode: ExecMode) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.engine.mode = mode;
        let setup = cfg.train_setup()?;
        let iters_per_epoch = setup.engine.iters_per_epoch(setup.train.len());
        let engine = Engine::new(setup.engine, setup.solver, setup.model)?;
        let plan = engine.plan_epoch(setup.shuffle_seed, 0, setup.train.len())?;
        Ok(StepFixture {
            engine,
            data: setup.train,
            plan,
            iters_per_epoch,
        })
    }

    /// Take iteration `i` of epoch 0, wrapping around.
    pub fn step(&mut self, i: usize) -> Result<f64> {
        let iter = i % self.iters_per_epoch;
        let out = self
            .engine
            .step(&self.data, &self.plan, iter, iter, self.iters_per_epoch)?;
        Ok(out.train_loss)
    }
}
