//! Synchronous data-parallel SGD.
//!
//! Each of the `k` workers computes the gradient of its shard-batch loss
//! normalized by the total minibatch `k*n`, so that summing across workers
//! yields the large-minibatch gradient directly. Worker gradients are summed
//! inside each server, allreduced across servers bucket by bucket, and
//! broadcast back. Every replica then adds weight decay and applies the same
//! solver step.
//!
//! In accumulated mode a single replica walks the `k` shard-batches in turn,
//! keeping a separate BN running-statistics slot per shard, and sums the same
//! normalized gradients, grouped by server as in the distributed path, before
//! one step.

pub mod pipeline;
pub mod record;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::collectives::{
    build_schedule, channel_mesh, local_broadcast, local_reduce, run_threaded_tasks, tcp_mesh,
    Algorithm, ChannelEndpoint, CostModel, LinkCounters, Schedule, TcpEndpoint, Topology,
    TrafficReport, TransportKind,
};
use crate::data::{epoch_shards, independent_worker_shards, Dataset, EpochPlan};
use crate::error::{Error, Result};
use crate::models::{Batch, BnState, Mode, Model};
use crate::numerics::Tensor;
use crate::solver::{apply_masked_weight_decay, lr_at, MomentumForm, Solver, SolverConfig};

pub use pipeline::{
    pipeline_schedule, run_pipeline, trace_admitted, Event, Interleaving, PipelineOutcome,
    PipelinePlan, PipelineTask,
};
pub use record::{TrainRecord, TrainRow, RECORD_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Distributed,
    Accumulated,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Distributed => "distributed",
            ExecMode::Accumulated => "accumulated",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distributed" => Ok(ExecMode::Distributed),
            "accumulated" => Ok(ExecMode::Accumulated),
            other => Err(Error::config(
                "engine.mode",
                format!("unknown mode `{other}` (distributed, accumulated)"),
            )),
        }
    }
}

/// Deliberately incorrect variants, for differential testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pitfall {
    /// Each worker normalizes its loss by `n` instead of `k*n`.
    NormalizeByN,
    /// Keep the base learning rate and scale the loss gradient instead.
    ScaleLoss,
    /// Absorbed momentum without the `lr_t / lr_{t-1}` rescaling.
    NoMomentumCorrection,
    /// Every worker shuffles the data with its own seed.
    PerWorkerShuffle,
}

impl Pitfall {
    pub const ALL: [Pitfall; 4] = [
        Pitfall::NormalizeByN,
        Pitfall::ScaleLoss,
        Pitfall::NoMomentumCorrection,
        Pitfall::PerWorkerShuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pitfall::NormalizeByN => "normalize-by-n",
            Pitfall::ScaleLoss => "scale-loss",
            Pitfall::NoMomentumCorrection => "no-momentum-correction",
            Pitfall::PerWorkerShuffle => "per-worker-shuffle",
        }
    }
}

impl fmt::Display for Pitfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pitfall {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pitfall::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Pitfall::ALL.iter().map(|p| p.name()).collect();
                Error::config(
                    "engine.pitfall",
                    format!("unknown pitfall `{s}` ({})", names.join(", ")),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub k: usize,
    pub n: usize,
    pub topology: Topology,
    pub algo: Algorithm,
    pub mode: ExecMode,
    /// Maximum number of allreduces in flight.
    pub pipeline_window: usize,
    pub epochs: usize,
    pub transport: TransportKind,
    /// Compare replica checksums after every distributed step.
    pub check_replicas: bool,
    pub pitfall: Option<Pitfall>,
    /// Prices simulated transport time.
    pub cost: CostModel,
    pub kernel_threshold: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 8,
            n: 4,
            topology: Topology {
                servers: 1,
                gpus_per_server: 8,
            },
            algo: Algorithm::Ring,
            mode: ExecMode::Distributed,
            pipeline_window: 2,
            epochs: 5,
            transport: TransportKind::Simulated,
            check_replicas: true,
            pitfall: None,
            cost: CostModel::default(),
            kernel_threshold: crate::collectives::LOCAL_KERNEL_THRESHOLD_BYTES,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("engine.k", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("engine.n", "must be at least 1"));
        }
        if self.pipeline_window == 0 {
            return Err(Error::config(
                "engine.pipeline_window",
                "must be at least 1",
            ));
        }
        Topology::new(self.topology.servers, self.topology.gpus_per_server)?;
        if self.mode == ExecMode::Distributed && self.k != self.topology.workers() {
            return Err(Error::config(
                "engine.k",
                format!(
                    "k={} does not match servers x gpus_per_server = {} x {}",
                    self.k, self.topology.servers, self.topology.gpus_per_server
                ),
            ));
        }
        if self.mode == ExecMode::Distributed
            && self.algo == Algorithm::HalvingDoubling
            && !self.topology.servers.is_power_of_two()
        {
            return Err(Error::NotPowerOfTwo(self.topology.servers));
        }
        if self.cost.latency.is_nan()
            || self.cost.latency < 0.0
            || self.cost.bandwidth.is_nan()
            || self.cost.bandwidth <= 0.0
        {
            return Err(Error::config(
                "engine.bandwidth",
                "latency must be non-negative and bandwidth positive",
            ));
        }
        Ok(())
    }

    pub fn total_batch(&self) -> usize {
        self.k * self.n
    }

    /// Iterations per epoch over `samples` training samples.
    pub fn iters_per_epoch(&self, samples: usize) -> usize {
        (samples / self.k) / self.n
    }
}

/// The solver settings actually run under `pitfall`.
pub fn effective_solver(solver: &SolverConfig, pitfall: Option<Pitfall>) -> SolverConfig {
    let mut s = solver.clone();
    if pitfall == Some(Pitfall::NoMomentumCorrection) {
        s.momentum_form = MomentumForm::Absorbed;
        s.momentum_correction = false;
    }
    s
}

/// Divisor applied to each worker's summed per-sample loss.
pub fn loss_normalizer(config: &EngineConfig) -> f64 {
    if config.pitfall == Some(Pitfall::NormalizeByN) {
        config.n as f64
    } else {
        config.total_batch() as f64
    }
}

/// Loss and `(1/norm) sum grad eps` of one worker's batch. With
/// `norm = k*n` the `k` results sum to the large-minibatch gradient.
pub fn worker_gradient(model: &mut Model, batch: &Batch, norm: f64) -> Result<(f64, Tensor)> {
    let loss = model.forward_loss(batch, Mode::Train)?;
    let grad = model.backward_normalized(norm)?;
    Ok((loss, grad))
}

pub struct Worker {
    pub model: Model,
    pub solver: Solver,
}

enum Mesh {
    Channel(Vec<ChannelEndpoint>),
    Tcp(Vec<TcpEndpoint>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub lr: f64,
    pub train_loss: f64,
    /// Simulated communication time of this step.
    pub comm_seconds: f64,
}

pub struct Engine {
    config: EngineConfig,
    solver: SolverConfig,
    workers: Vec<Worker>,
    bn_slots: Vec<BnState>,
    mask: Tensor,
    buckets: Vec<Range<usize>>,
    schedules: Vec<Arc<Schedule>>,
    mesh: Option<Mesh>,
    last_traffic: Vec<TrafficReport>,
}

impl Engine {
    pub fn new(config: EngineConfig, solver: SolverConfig, model: Model) -> Result<Self> {
        config.validate()?;
        solver.validate()?;
        let solver = effective_solver(&solver, config.pitfall);
        let replicas = match config.mode {
            ExecMode::Distributed => config.k,
            ExecMode::Accumulated => 1,
        };
        let workers = (0..replicas)
            .map(|_| Worker {
                solver: Solver::new(&solver, model.param_count()),
                model: model.clone(),
            })
            .collect();
        let bn_slots = match config.mode {
            ExecMode::Distributed => Vec::new(),
            ExecMode::Accumulated => vec![model.bn_state(); config.k],
        };
        // Gradients become available last layer first.
        let buckets: Vec<Range<usize>> = model.param_groups().into_iter().rev().collect();
        let p = config.topology.servers;
        let distributed = config.mode == ExecMode::Distributed && p > 1;
        let schedules = if distributed {
            buckets
                .iter()
                .map(|b| build_schedule(config.algo, p, b.len()).map(Arc::new))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mesh = match (distributed, config.transport) {
            (true, TransportKind::Channel) => Some(Mesh::Channel(channel_mesh(p))),
            (true, TransportKind::Tcp) => Some(Mesh::Tcp(tcp_mesh(p)?)),
            _ => None,
        };
        Ok(Self {
            mask: model.decay_mask(),
            config,
            solver,
            workers,
            bn_slots,
            buckets,
            schedules,
            mesh,
            last_traffic: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [Worker] {
        &mut self.workers
    }

    /// Parameters of replica 0.
    pub fn params(&self) -> &Tensor {
        self.workers[0].model.params()
    }

    /// Allreduce buckets in execution order.
    pub fn buckets(&self) -> &[Range<usize>] {
        &self.buckets
    }

    /// Per-bucket traffic of the most recent distributed step.
    pub fn last_traffic(&self) -> &[TrafficReport] {
        &self.last_traffic
    }

    /// The epoch's shard assignment, honouring the shuffle pitfall.
    pub fn plan_epoch(&self, seed: u64, epoch: usize, samples: usize) -> Result<EpochPlan> {
        if self.config.pitfall == Some(Pitfall::PerWorkerShuffle) {
            independent_worker_shards(seed, epoch, samples, self.config.k)
        } else {
            epoch_shards(seed, epoch, samples, self.config.k)
        }
    }

    fn norm(&self) -> f64 {
        loss_normalizer(&self.config)
    }

    /// One synchronous SGD update on iteration `iter` of `plan`; `global_iter`
    /// drives the learning-rate schedule.
    pub fn step(
        &mut self,
        data: &Dataset,
        plan: &EpochPlan,
        iter: usize,
        global_iter: usize,
        iters_per_epoch: usize,
    ) -> Result<StepOutcome> {
        let lr = lr_at(
            &self.solver,
            self.config.total_batch(),
            global_iter,
            iters_per_epoch,
        );
        let (train_loss, comm_seconds) = match self.config.mode {
            ExecMode::Distributed => self.distributed_step(data, plan, iter, global_iter, lr)?,
            ExecMode::Accumulated => (
                self.accumulated_step(data, plan, iter, global_iter, lr)?,
                0.0,
            ),
        };
        Ok(StepOutcome {
            lr,
            train_loss,
            comm_seconds,
        })
    }

    fn distributed_step(
        &mut self,
        data: &Dataset,
        plan: &EpochPlan,
        iter: usize,
        global_iter: usize,
        lr: f64,
    ) -> Result<(f64, f64)> {
        let n = self.config.n;
        let norm = self.norm();
        let mut loss_sum = 0.0;
        let mut grads = Vec::with_capacity(self.config.k);
        for (j, w) in self.workers.iter_mut().enumerate() {
            let batch = data.batch(plan.batch_indices(j, iter, n))?;
            let (loss, g) = worker_gradient(&mut w.model, &batch, norm)?;
            loss_sum += loss;
            grads.push(g);
        }
        let train_loss = loss_sum / self.config.k as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: global_iter });
        }
        let (aggregated, comm) = self.aggregate(grads)?;
        for (w, g) in self.workers.iter_mut().zip(&aggregated) {
            update(&self.solver, self.config.pitfall, &self.mask, w, g, lr)?;
        }
        if self.config.check_replicas {
            let sum = self.workers[0].model.params().checksum();
            if self
                .workers
                .iter()
                .any(|w| w.model.params().checksum() != sum)
            {
                return Err(Error::ReplicaDivergence { iter: global_iter });
            }
        }
        Ok((train_loss, comm))
    }

    fn accumulated_step(
        &mut self,
        data: &Dataset,
        plan: &EpochPlan,
        iter: usize,
        global_iter: usize,
        lr: f64,
    ) -> Result<f64> {
        let n = self.config.n;
        let norm = self.norm();
        let w = &mut self.workers[0];
        let mut loss_sum = 0.0;
        let mut grads = Vec::with_capacity(self.config.k);
        for (j, slot) in self.bn_slots.iter_mut().enumerate() {
            let batch = data.batch(plan.batch_indices(j, iter, n))?;
            w.model.set_bn_state(slot);
            let (loss, g) = worker_gradient(&mut w.model, &batch, norm)?;
            *slot = w.model.bn_state();
            loss_sum += loss;
            grads.push(g);
        }
        w.model.set_bn_state(&self.bn_slots[0]);
        let train_loss = loss_sum / self.config.k as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: global_iter });
        }
        // Same association as the distributed path: per-server sums first.
        let server_sums: Vec<Tensor> = grads
            .chunks(self.config.topology.gpus_per_server)
            .map(local_reduce)
            .collect::<Result<_>>()?;
        let g = local_reduce(&server_sums)?;
        update(&self.solver, self.config.pitfall, &self.mask, w, &g, lr)?;
        Ok(train_loss)
    }

    /// Three-phase aggregation: local sum per server, bucketed inter-server
    /// allreduce, local broadcast. Returns one aggregate per worker and the
    /// simulated communication time.
    fn aggregate(&mut self, grads: Vec<Tensor>) -> Result<(Vec<Tensor>, f64)> {
        let g = self.config.topology.gpus_per_server;
        let p = self.config.topology.servers;
        let server_sums: Vec<Tensor> = grads.chunks(g).map(local_reduce).collect::<Result<_>>()?;
        self.last_traffic.clear();
        if p == 1 {
            return Ok((local_broadcast(&server_sums[0], g), 0.0));
        }
        let inputs: Vec<Vec<Vec<f64>>> = self
            .buckets
            .iter()
            .map(|b| {
                server_sums
                    .iter()
                    .map(|s| s.data()[b.clone()].to_vec())
                    .collect()
            })
            .collect();
        let outputs: Vec<Vec<Vec<f64>>> = match self.mesh.as_mut() {
            None => {
                let plan = pipeline_schedule(self.buckets.len(), self.config.pipeline_window)?;
                let tasks = self
                    .schedules
                    .iter()
                    .zip(inputs)
                    .map(|(s, inputs)| PipelineTask {
                        schedule: s.clone(),
                        inputs,
                    })
                    .collect();
                let out = run_pipeline(&plan, tasks, Interleaving::Sweep, None)?;
                self.last_traffic = out.reports;
                out.outputs
            }
            Some(mesh) => {
                let tasks: Vec<(&Schedule, &[Vec<f64>])> = self
                    .schedules
                    .iter()
                    .zip(&inputs)
                    .map(|(s, i)| (s.as_ref(), i.as_slice()))
                    .collect();
                let (outs, _counters): (_, Vec<LinkCounters>) = match mesh {
                    Mesh::Channel(eps) => run_threaded_tasks(&tasks, eps)?,
                    Mesh::Tcp(eps) => run_threaded_tasks(&tasks, eps)?,
                };
                outs
            }
        };
        let len = server_sums[0].len();
        let mut result = Vec::with_capacity(self.config.k);
        for rank in 0..p {
            let mut buf = vec![0.0; len];
            for (b, out) in self.buckets.iter().zip(&outputs) {
                buf[b.clone()].copy_from_slice(&out[rank]);
            }
            result.extend(local_broadcast(&Tensor::from_vec(buf), g));
        }
        let comm = self
            .last_traffic
            .iter()
            .map(|r| {
                r.rounds as f64 * self.config.cost.latency
                    + r.servers.iter().map(|s| s.bytes_sent).max().unwrap_or(0) as f64
                        / self.config.cost.bandwidth
            })
            .sum();
        Ok((result, comm))
    }

    /// Mean loss of replica 0 on `batch` using running BN statistics.
    pub fn eval_loss(&mut self, batch: &Batch) -> Result<f64> {
        self.workers[0].model.forward_loss(batch, Mode::Eval)
    }
}

fn update(
    solver: &SolverConfig,
    pitfall: Option<Pitfall>,
    mask: &Tensor,
    w: &mut Worker,
    grad: &Tensor,
    lr: f64,
) -> Result<()> {
    let (grad, step_lr) = if pitfall == Some(Pitfall::ScaleLoss) {
        let scale = if solver.base_lr == 0.0 {
            0.0
        } else {
            lr / solver.base_lr
        };
        let mut g = grad.clone();
        g.scale(scale);
        (g, solver.base_lr)
    } else {
        (grad.clone(), lr)
    };
    let full = apply_masked_weight_decay(&grad, w.model.params(), mask, solver.weight_decay)?;
    let mut params = w.model.params().clone();
    w.solver.step(&mut params, &full, step_lr)?;
    w.model.set_params(params)
}

/// Everything a training run needs.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: Dataset,
    pub eval: Dataset,
    pub model: Model,
    pub solver: SolverConfig,
    pub engine: EngineConfig,
    pub shuffle_seed: u64,
    /// Echoed as comment lines in the record.
    pub comments: Vec<String>,
}

pub struct TrainOutcome {
    pub record: TrainRecord,
    pub engine: Engine,
}

pub fn train(setup: TrainSetup) -> Result<TrainOutcome> {
    let TrainSetup {
        train: data,
        eval,
        model,
        solver,
        engine: config,
        shuffle_seed,
        comments,
    } = setup;
    let samples = data.len();
    let ipe = config.iters_per_epoch(samples);
    if ipe == 0 {
        return Err(Error::config(
            "engine.n",
            format!(
                "k*n = {} exceeds the {samples} training samples",
                config.total_batch()
            ),
        ));
    }
    let simulated = config.transport == TransportKind::Simulated;
    let epochs = config.epochs;
    let mut engine = Engine::new(config, solver, model)?;
    let eval_batch = eval.full_batch()?;
    let mut record = TrainRecord {
        comments,
        rows: Vec::with_capacity(epochs * ipe),
    };
    let start = Instant::now();
    let mut sim_seconds = 0.0;
    let mut global = 0;
    for epoch in 0..epochs {
        let plan = engine.plan_epoch(shuffle_seed, epoch, samples)?;
        for iter in 0..ipe {
            let out = engine.step(&data, &plan, iter, global, ipe)?;
            sim_seconds += out.comm_seconds;
            let eval_loss = engine.eval_loss(&eval_batch)?;
            record.rows.push(TrainRow {
                epoch,
                iter: global,
                lr: out.lr,
                train_loss: out.train_loss,
                eval_loss,
                wall_seconds: if simulated {
                    sim_seconds
                } else {
                    start.elapsed().as_secs_f64()
                },
            });
            global += 1;
        }
    }
    Ok(TrainOutcome { record, engine })
}

#[cfg(test)]
mod tests;
