//! Experiment configuration in a flat `section.key = value` text format.
//!
//! ```text
//! # comment
//! engine.k = 8
//! solver.milestones = 30, 60, 80
//! ```
//!
//! Every key has a default; a file only lists what it changes. Lists are
//! comma separated and may be empty. Booleans accept `true`/`false`.

use std::fmt::Write as _;

use crate::collectives::{Algorithm, CostModel, Topology, TransportKind};
use crate::data::{make_synthetic, Dataset};
use crate::engine::{EngineConfig, ExecMode, Pitfall, TrainSetup};
use crate::error::{Error, Result};
use crate::models::{init_model, LossKind, Model, ModelSpec};
use crate::solver::{MomentumForm, Scaling, SolverConfig, Warmup};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub eval_samples: usize,
    /// Round every input to the nearest integer.
    pub integer_valued: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            dim: 8,
            classes: 4,
            separation: 2.0,
            eval_samples: 256,
            integer_valued: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub residual_blocks: usize,
    pub batch_norm: bool,
    pub gamma_last_init: f64,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            residual_blocks: 1,
            batch_norm: true,
            gamma_last_init: 0.0,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            shuffle: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub engine: EngineConfig,
    pub seeds: Seeds,
    pub output: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            solver: SolverConfig {
                base_lr: 0.05,
                ref_kn: 4,
                milestones: vec![3, 4],
                warmup: Warmup::Gradual,
                warmup_epochs: 1,
                ..SolverConfig::default()
            },
            engine: EngineConfig {
                topology: Topology {
                    servers: 2,
                    gpus_per_server: 4,
                },
                ..EngineConfig::default()
            },
            seeds: Seeds::default(),
            output: "train.csv".to_string(),
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::config(key, reason)
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| invalid(key, format!("expected a non-negative integer, got `{v}`")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| invalid(key, format!("expected a non-negative integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| invalid(key, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_usize(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn warmup_name(w: Warmup) -> &'static str {
    match w {
        Warmup::None => "none",
        Warmup::Constant => "constant",
        Warmup::Gradual => "gradual",
    }
}

fn scaling_name(s: Scaling) -> &'static str {
    match s {
        Scaling::Linear => "linear",
        Scaling::Sqrt => "sqrt",
        Scaling::None => "none",
    }
}

fn form_name(f: MomentumForm) -> &'static str {
    match f {
        MomentumForm::Reference => "reference",
        MomentumForm::Absorbed => "absorbed",
    }
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::CrossEntropy => "cross-entropy",
        LossKind::Linear => "linear",
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Overlay the assignments in `text`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                invalid(
                    "config",
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(assignment, "expected `section.key=value`"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let s = &mut self.solver;
        let e = &mut self.engine;
        match key {
            "data.samples" => d.samples = parse_usize(key, v)?,
            "data.dim" => d.dim = parse_usize(key, v)?,
            "data.classes" => d.classes = parse_usize(key, v)?,
            "data.separation" => d.separation = parse_f64(key, v)?,
            "data.eval_samples" => d.eval_samples = parse_usize(key, v)?,
            "data.integer_valued" => d.integer_valued = parse_bool(key, v)?,
            "model.hidden" => m.hidden = parse_list(key, v)?,
            "model.residual_blocks" => m.residual_blocks = parse_usize(key, v)?,
            "model.batch_norm" => m.batch_norm = parse_bool(key, v)?,
            "model.gamma_last_init" => m.gamma_last_init = parse_f64(key, v)?,
            "model.loss" => {
                m.loss = match v {
                    "cross-entropy" => LossKind::CrossEntropy,
                    "linear" => LossKind::Linear,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("unknown loss `{v}` (cross-entropy, linear)"),
                        ))
                    }
                }
            }
            "solver.base_lr" => s.base_lr = parse_f64(key, v)?,
            "solver.ref_kn" => s.ref_kn = parse_usize(key, v)?,
            "solver.momentum" => s.momentum = parse_f64(key, v)?,
            "solver.weight_decay" => s.weight_decay = parse_f64(key, v)?,
            "solver.milestones" => s.milestones = parse_list(key, v)?,
            "solver.decay_factor" => s.decay_factor = parse_f64(key, v)?,
            "solver.warmup" => {
                s.warmup = match v {
                    "none" => Warmup::None,
                    "constant" => Warmup::Constant,
                    "gradual" => Warmup::Gradual,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("unknown warmup `{v}` (none, constant, gradual)"),
                        ))
                    }
                }
            }
            "solver.warmup_epochs" => s.warmup_epochs = parse_usize(key, v)?,
            "solver.scaling" => {
                s.scaling = match v {
                    "linear" => Scaling::Linear,
                    "sqrt" => Scaling::Sqrt,
                    "none" => Scaling::None,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("unknown scaling `{v}` (linear, sqrt, none)"),
                        ))
                    }
                }
            }
            "solver.momentum_form" => {
                s.momentum_form = match v {
                    "reference" => MomentumForm::Reference,
                    "absorbed" => MomentumForm::Absorbed,
                    _ => {
                        return Err(invalid(
                            key,
                            format!("unknown form `{v}` (reference, absorbed)"),
                        ))
                    }
                }
            }
            "solver.momentum_correction" => s.momentum_correction = parse_bool(key, v)?,
            "engine.k" => e.k = parse_usize(key, v)?,
            "engine.n" => e.n = parse_usize(key, v)?,
            "engine.servers" => e.topology.servers = parse_usize(key, v)?,
            "engine.gpus_per_server" => e.topology.gpus_per_server = parse_usize(key, v)?,
            "engine.algo" => {
                e.algo = v.parse::<Algorithm>().map_err(|_| {
                    invalid(key, format!("unknown algorithm `{v}` (ring, hd, blocks)"))
                })?
            }
            "engine.mode" => e.mode = v.parse::<ExecMode>()?,
            "engine.pipeline_window" => e.pipeline_window = parse_usize(key, v)?,
            "engine.epochs" => e.epochs = parse_usize(key, v)?,
            "engine.transport" => e.transport = v.parse::<TransportKind>()?,
            "engine.check_replicas" => e.check_replicas = parse_bool(key, v)?,
            "engine.pitfall" => {
                e.pitfall = match v {
                    "none" => None,
                    other => Some(other.parse::<Pitfall>()?),
                }
            }
            "engine.latency" => e.cost.latency = parse_f64(key, v)?,
            "engine.bandwidth" => e.cost.bandwidth = parse_f64(key, v)?,
            "engine.kernel_threshold" => e.kernel_threshold = parse_u64(key, v)?,
            "seed.data" => self.seeds.data = parse_u64(key, v)?,
            "seed.init" => self.seeds.init = parse_u64(key, v)?,
            "seed.shuffle" => self.seeds.shuffle = parse_u64(key, v)?,
            "output.path" => self.output = v.to_string(),
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Every effective setting, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let s = &self.solver;
        let e = &self.engine;
        vec![
            ("data.samples", d.samples.to_string()),
            ("data.dim", d.dim.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.separation", d.separation.to_string()),
            ("data.eval_samples", d.eval_samples.to_string()),
            ("data.integer_valued", d.integer_valued.to_string()),
            ("model.hidden", list(&m.hidden)),
            ("model.residual_blocks", m.residual_blocks.to_string()),
            ("model.batch_norm", m.batch_norm.to_string()),
            ("model.gamma_last_init", m.gamma_last_init.to_string()),
            ("model.loss", loss_name(m.loss).to_string()),
            ("solver.base_lr", s.base_lr.to_string()),
            ("solver.ref_kn", s.ref_kn.to_string()),
            ("solver.momentum", s.momentum.to_string()),
            ("solver.weight_decay", s.weight_decay.to_string()),
            ("solver.milestones", list(&s.milestones)),
            ("solver.decay_factor", s.decay_factor.to_string()),
            ("solver.warmup", warmup_name(s.warmup).to_string()),
            ("solver.warmup_epochs", s.warmup_epochs.to_string()),
            ("solver.scaling", scaling_name(s.scaling).to_string()),
            (
                "solver.momentum_form",
                form_name(s.momentum_form).to_string(),
            ),
            (
                "solver.momentum_correction",
                s.momentum_correction.to_string(),
            ),
            ("engine.k", e.k.to_string()),
            ("engine.n", e.n.to_string()),
            ("engine.servers", e.topology.servers.to_string()),
            (
                "engine.gpus_per_server",
                e.topology.gpus_per_server.to_string(),
            ),
            ("engine.algo", e.algo.to_string()),
            ("engine.mode", e.mode.to_string()),
            ("engine.pipeline_window", e.pipeline_window.to_string()),
            ("engine.epochs", e.epochs.to_string()),
            ("engine.transport", e.transport.to_string()),
            ("engine.check_replicas", e.check_replicas.to_string()),
            (
                "engine.pitfall",
                e.pitfall.map_or("none".to_string(), |p| p.to_string()),
            ),
            ("engine.latency", e.cost.latency.to_string()),
            ("engine.bandwidth", e.cost.bandwidth.to_string()),
            ("engine.kernel_threshold", e.kernel_threshold.to_string()),
            ("seed.data", self.seeds.data.to_string()),
            ("seed.init", self.seeds.init.to_string()),
            ("seed.shuffle", self.seeds.shuffle.to_string()),
            ("output.path", self.output.clone()),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.dim,
            hidden: self.model.hidden.clone(),
            residual_blocks: self.model.residual_blocks,
            batch_norm: self.model.batch_norm,
            classes: self.data.classes,
            loss: self.model.loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        for (key, v) in [
            ("data.samples", d.samples),
            ("data.dim", d.dim),
            ("data.classes", d.classes),
            ("data.eval_samples", d.eval_samples),
            ("engine.epochs", self.engine.epochs),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if d.separation < 0.0 {
            return Err(invalid("data.separation", "must be non-negative"));
        }
        if self.model.residual_blocks > 0 && self.model.hidden.is_empty() {
            return Err(invalid(
                "model.residual_blocks",
                "residual blocks need at least one hidden layer",
            ));
        }
        self.model_spec().validate()?;
        self.solver.validate()?;
        self.engine.validate()?;
        if self.engine.iters_per_epoch(d.samples) == 0 {
            return Err(invalid(
                "engine.n",
                format!(
                    "k*n = {} leaves no full iteration in {} samples",
                    self.engine.total_batch(),
                    d.samples
                ),
            ));
        }
        if self.output.is_empty() {
            return Err(invalid("output.path", "must not be empty"));
        }
        Ok(())
    }

    /// Train and eval sets drawn from the same class clusters.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let mut all = make_synthetic(
            self.seeds.data,
            d.samples + d.eval_samples,
            d.dim,
            d.classes,
            d.separation,
        )?;
        if d.integer_valued {
            all = all.rounded();
        }
        all.split_at(d.samples)
    }

    pub fn init_model(&self) -> Result<Model> {
        init_model(
            &self.model_spec(),
            self.seeds.init,
            self.model.gamma_last_init,
        )
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::new(
            self.engine.topology.servers,
            self.engine.topology.gpus_per_server,
        )
    }

    pub fn cost_model(&self) -> CostModel {
        self.engine.cost
    }

    /// Validated training inputs, with the effective settings as comments.
    pub fn train_setup(&self) -> Result<TrainSetup> {
        self.validate()?;
        let (train, eval) = self.datasets()?;
        Ok(TrainSetup {
            train,
            eval,
            model: self.init_model()?,
            solver: self.solver.clone(),
            engine: self.engine.clone(),
            shuffle_seed: self.seeds.shuffle,
            comments: self
                .entries()
                .into_iter()
                .map(|(k, v)| format!("{k} = {v}"))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# toy\n\nengine.k = 4\nengine.servers = 1\nengine.gpus_per_server = 4\nsolver.milestones =\nsolver.warmup = gradual\n",
        )
        .unwrap();
        assert_eq!(cfg.engine.k, 4);
        assert!(cfg.solver.milestones.is_empty());
        assert_eq!(cfg.solver.warmup, Warmup::Gradual);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let field = |r: Result<ExperimentConfig>| match r {
            Err(Error::InvalidConfig { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            field(ExperimentConfig::parse("engine.k = many")),
            "engine.k"
        );
        assert_eq!(
            field(ExperimentConfig::parse("engine.bogus = 1")),
            "engine.bogus"
        );
        assert_eq!(
            field(ExperimentConfig::parse("solver.warmup = slow")),
            "solver.warmup"
        );
        let mut cfg = ExperimentConfig::default();
        cfg.engine.k = 6;
        assert!(
            matches!(cfg.validate(), Err(Error::InvalidConfig { field, .. }) if field == "engine.k")
        );
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn set_override_syntax() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_override("engine.mode=accumulated").unwrap();
        assert_eq!(cfg.engine.mode, ExecMode::Accumulated);
        cfg.set_override("engine.pitfall=per-worker-shuffle")
            .unwrap();
        assert_eq!(cfg.engine.pitfall, Some(Pitfall::PerWorkerShuffle));
        assert!(cfg.set_override("engine.mode").is_err());
    }

    #[test]
    fn datasets_share_clusters() {
        let cfg = ExperimentConfig::default();
        let (train, eval) = cfg.datasets().unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(eval.len(), 256);
        assert_eq!(train.dim(), eval.dim());
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            (
                1usize..5000,
                1usize..64,
                1usize..10,
                0.0f64..10.0,
                1usize..999,
                any::<bool>(),
            ),
            (
                proptest::collection::vec(1usize..64, 0..4),
                0usize..3,
                any::<bool>(),
                0.0f64..1.0,
                any::<bool>(),
            ),
            (
                0.0f64..5.0,
                1usize..9999,
                0.0f64..0.99,
                0.0f64..0.01,
                proptest::collection::btree_set(0usize..200, 0..4),
                0.01f64..1.0,
            ),
            (
                0usize..3,
                0usize..10,
                0usize..3,
                any::<bool>(),
                any::<bool>(),
            ),
            (
                1usize..9,
                1usize..9,
                1usize..64,
                0usize..3,
                1usize..9,
                1usize..100,
            ),
            (
                0usize..5,
                any::<bool>(),
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                "[a-z_./]{1,20}",
            ),
        )
            .prop_map(|(d, m, s, s2, e, misc)| {
                let mut c = ExperimentConfig {
                    data: DataConfig {
                        samples: d.0,
                        dim: d.1,
                        classes: d.2,
                        separation: d.3,
                        eval_samples: d.4,
                        integer_valued: d.5,
                    },
                    ..ExperimentConfig::default()
                };
                c.model = ModelConfig {
                    hidden: m.0,
                    residual_blocks: m.1,
                    batch_norm: m.2,
                    gamma_last_init: m.3,
                    loss: if m.4 {
                        LossKind::Linear
                    } else {
                        LossKind::CrossEntropy
                    },
                };
                c.solver = SolverConfig {
                    base_lr: s.0,
                    ref_kn: s.1,
                    momentum: s.2,
                    weight_decay: s.3,
                    milestones: s.4.into_iter().collect(),
                    decay_factor: s.5,
                    warmup: [Warmup::None, Warmup::Constant, Warmup::Gradual][s2.0],
                    warmup_epochs: s2.1,
                    scaling: [Scaling::Linear, Scaling::Sqrt, Scaling::None][s2.2],
                    momentum_form: if s2.3 {
                        MomentumForm::Absorbed
                    } else {
                        MomentumForm::Reference
                    },
                    momentum_correction: s2.4,
                };
                c.engine.topology.servers = e.0;
                c.engine.topology.gpus_per_server = e.1;
                c.engine.k = e.0 * e.1;
                c.engine.n = e.2;
                c.engine.algo = Algorithm::ALL[e.3];
                c.engine.pipeline_window = e.4;
                c.engine.epochs = e.5;
                c.engine.pitfall = if misc.0 == 4 {
                    None
                } else {
                    Some(Pitfall::ALL[misc.0])
                };
                c.engine.check_replicas = misc.1;
                c.seeds = Seeds {
                    data: misc.2,
                    init: misc.3,
                    shuffle: misc.4,
                };
                c.output = misc.5;
                c
            })
    }

    proptest! {
        #[test]
        fn round_trip(cfg in arb_config()) {
            let text = cfg.serialize();
            let back = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(ExperimentConfig::parse(&back.serialize()).unwrap(), back);
        }
    }
}
