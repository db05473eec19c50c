//! Self-checks: a finite-difference gradient checker and a suite of named
//! invariants, each compared against an independent oracle.

use std::fmt;
use std::sync::Arc;

use crate::collectives::{
    allreduce, build_schedule, predict_bytes, Algorithm, Topology, TransportKind, ELEM_BYTES,
};
use crate::cost::{cost_report, CostQuery, Verdict};
use crate::data::{epoch_consistent, make_synthetic, Dataset};
use crate::engine::{
    effective_solver, loss_normalizer, pipeline_schedule, run_pipeline, train, worker_gradient,
    Engine, EngineConfig, ExecMode, Interleaving, PipelineTask, Pitfall, TrainSetup,
};
use crate::error::Result;
use crate::models::{init_model, Batch, LossKind, Mode, Model, ModelSpec};
use crate::numerics::{fisher_yates, rel_diff, Rng, Tensor};
use crate::solver::{
    linear_scaled_lr, lr_at, sqrt_scaled_lr, MomentumForm, Scaling, Solver, SolverConfig, Warmup,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradient entries.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose perturbation flips a ReLU.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOLERANCE
    }
}

/// Compare the analytic train-mode gradient of the batch-mean loss with
/// central differences, entry by entry.
pub fn gradient_check(model: &Model, batch: &Batch) -> Result<GradCheck> {
    let mut m = model.clone();
    m.forward_loss(batch, Mode::Train)?;
    let signature = m.relu_signature();
    let analytic = m.backward()?;
    let base = model.params().clone();
    let mut out = GradCheck {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..base.len() {
        let mut probe = |delta: f64| -> Result<(f64, u64)> {
            let mut p = base.clone();
            p.data_mut()[i] += delta;
            m.set_params(p)?;
            let loss = m.forward_loss(batch, Mode::Train)?;
            Ok((loss, m.relu_signature()))
        };
        let (plus, s_plus) = probe(FD_STEP)?;
        let (minus, s_minus) = probe(-FD_STEP)?;
        if s_plus != signature || s_minus != signature {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        out.max_rel = out.max_rel.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

/// A random small model and batch; even seeds use batch norm, every third
/// seed adds a residual block.
pub fn gradcheck_instance(seed: u64) -> Result<(Model, Batch)> {
    let mut rng = Rng::new(seed);
    let dim = 2 + rng.below(4) as usize;
    let classes = 2 + rng.below(3) as usize;
    let width = 3 + rng.below(5) as usize;
    let n = 3 + rng.below(6) as usize;
    let spec = ModelSpec {
        input_dim: dim,
        hidden: vec![width; 1 + rng.below(2) as usize],
        residual_blocks: usize::from(seed.is_multiple_of(3)),
        batch_norm: seed.is_multiple_of(2),
        classes,
        loss: LossKind::CrossEntropy,
    };
    let model = init_model(&spec, rng.next_u64(), 1.0)?;
    let inputs = (0..n * dim).map(|_| rng.normal()).collect();
    let labels = (0..n).map(|_| rng.below(classes as u64) as usize).collect();
    let batch = Batch::new(Tensor::new(inputs, vec![n, dim])?, labels)?;
    Ok((model, batch))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<26} {}", self.name, self.detail)
    }
}

type Check = fn(Option<Pitfall>) -> Result<(bool, String)>;

pub const CHECKS: [(&str, Check); 16] = [
    ("prng", check_prng),
    ("fisher-yates", check_fisher_yates),
    ("scaling-rule", check_scaling_rule),
    ("momentum-equivalence", check_momentum_equivalence),
    ("constant-gradient", check_constant_gradient),
    ("weight-decay-separation", check_weight_decay),
    ("mode-equivalence", check_mode_equivalence),
    ("epoch-consistency", check_epoch_consistency),
    ("normalization", check_normalization),
    ("allreduce-agreement", check_allreduce_agreement),
    ("traffic-exactness", check_traffic),
    ("pipeline-soundness", check_pipeline),
    ("gradient-check", check_gradients),
    ("residual-identity", check_residual_identity),
    ("replica-consistency", check_replicas),
    ("bandwidth", check_bandwidth),
];

/// Run every check with `pitfall` injected into the engine.
pub fn run_suite(pitfall: Option<Pitfall>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let (passed, detail) = match check(pitfall) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name,
                passed,
                detail,
            }
        })
        .collect()
}

/// `max |a - b| / max |b|`, the error relative to the tensor's scale.
fn normwise(a: &Tensor, b: &Tensor) -> Result<f64> {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.max_abs_diff(b)?;
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

fn engine_config(
    k: usize,
    n: usize,
    servers: usize,
    pitfall: Option<Pitfall>,
) -> Result<EngineConfig> {
    Ok(EngineConfig {
        k,
        n,
        topology: Topology::new(servers, k / servers)?,
        pitfall,
        ..EngineConfig::default()
    })
}

fn plain_solver(base_lr: f64, momentum: f64, weight_decay: f64) -> SolverConfig {
    SolverConfig {
        base_lr,
        ref_kn: 1,
        momentum,
        weight_decay,
        milestones: vec![],
        warmup: Warmup::None,
        scaling: Scaling::None,
        ..SolverConfig::default()
    }
}

fn toy_data(seed: u64, samples: usize) -> Result<Dataset> {
    make_synthetic(seed, samples, 5, 3, 2.0)
}

fn check_prng(_: Option<Pitfall>) -> Result<(bool, String)> {
    // Published splitmix64 outputs for seed 0.
    let expected = [
        0xE220_A839_7B1D_CDAF_u64,
        0x6E78_9E6A_A1B9_65F4,
        0x06C4_5D18_8009_454F,
    ];
    let mut rng = Rng::new(0);
    let got: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
    let vectors = got == expected;
    let mut counts = [0usize; 7];
    let mut rng = Rng::new(42);
    let draws = 70_000;
    for _ in 0..draws {
        counts[rng.below(7) as usize] += 1;
    }
    let mean = draws as f64 / 7.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2) / mean)
        .sum();
    // 6 degrees of freedom; 22.46 is the 0.999 quantile.
    let uniform = chi2 < 22.46;
    Ok((
        vectors && uniform,
        format!("reference vectors {vectors}, chi2 {chi2:.2}"),
    ))
}

fn check_fisher_yates(_: Option<Pitfall>) -> Result<(bool, String)> {
    let mut counts = std::collections::HashMap::new();
    let trials = 24_000u64;
    for seed in 0..trials {
        *counts.entry(fisher_yates(seed, 4)).or_insert(0usize) += 1;
    }
    let perms = counts.len() == 24
        && counts.keys().all(|p| {
            let mut s = p.clone();
            s.sort_unstable();
            s == [0, 1, 2, 3]
        });
    let mean = trials as f64 / 24.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - mean).powi(2) / mean)
        .sum();
    // 23 degrees of freedom; 49.73 is the 0.999 quantile.
    let ok = perms && chi2 < 49.73;
    Ok((
        ok,
        format!("{} distinct permutations, chi2 {chi2:.2}", counts.len()),
    ))
}

fn check_scaling_rule(_: Option<Pitfall>) -> Result<(bool, String)> {
    let a = linear_scaled_lr(0.1, 8192, 256);
    let b = linear_scaled_lr(0.1, 512, 256);
    let c = sqrt_scaled_lr(0.1, 1024, 256);
    let ok = a == 3.2 && b == 0.2 && c == 0.2;
    Ok((ok, format!("8192 -> {a}, 512 -> {b}, sqrt 1024 -> {c}")))
}

/// Inline reference momentum SGD: `u = m u + g; w -= lr u`.
fn reference_step(w: &mut [f64], u: &mut [f64], g: &[f64], m: f64, lr: f64) {
    for ((wi, ui), gi) in w.iter_mut().zip(u.iter_mut()).zip(g) {
        *ui = m * *ui + gi;
        *wi -= lr * *ui;
    }
}

fn check_momentum_equivalence(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    // Solver level: the configured absorbed form against the reference loop
    // over a randomized learning-rate schedule.
    let cfg = SolverConfig {
        momentum_form: MomentumForm::Absorbed,
        momentum_correction: true,
        ..plain_solver(0.1, 0.9, 0.0)
    };
    let cfg = effective_solver(&cfg, pitfall);
    let mut rng = Rng::new(17);
    let dim = 100;
    let mut w_ref: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let mut u = vec![0.0; dim];
    let mut w = Tensor::from_vec(w_ref.clone());
    let mut solver = Solver::new(&cfg, dim);
    let mut lr = 0.1;
    for _ in 0..1000 {
        if rng.below(10) == 0 {
            lr = 0.01 + 0.5 * rng.next_f64();
        }
        let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        reference_step(&mut w_ref, &mut u, &g, cfg.momentum, lr);
        solver.step(&mut w, &Tensor::from_vec(g), lr)?;
    }
    let solver_dev = normwise(&w, &Tensor::from_vec(w_ref))?;

    // Engine level: a short warmup-and-decay run against a single model
    // trained on the concatenated minibatch with the reference loop.
    let data = toy_data(3, 64)?;
    let spec = ModelSpec::mlp(5, &[8], 3, false);
    let model = init_model(&spec, 7, 1.0)?;
    let solver_cfg = SolverConfig {
        base_lr: 0.05,
        ref_kn: 4,
        momentum: 0.9,
        weight_decay: 1e-3,
        milestones: vec![2],
        decay_factor: 0.1,
        warmup: Warmup::Gradual,
        warmup_epochs: 1,
        scaling: Scaling::Linear,
        momentum_form: MomentumForm::Reference,
        momentum_correction: true,
    };
    let config = engine_config(4, 4, 2, pitfall)?;
    let kn = config.total_batch();
    let ipe = config.iters_per_epoch(data.len());
    let mut engine = Engine::new(config.clone(), solver_cfg.clone(), model.clone())?;
    let mut oracle = model.clone();
    let mask = model.decay_mask();
    let mut u = vec![0.0; model.param_count()];
    let mut global = 0;
    for epoch in 0..3 {
        let plan = engine.plan_epoch(11, epoch, data.len())?;
        for iter in 0..ipe {
            engine.step(&data, &plan, iter, global, ipe)?;
            let batches = (0..config.k)
                .map(|j| data.batch(plan.batch_indices(j, iter, config.n)))
                .collect::<Result<Vec<_>>>()?;
            let (_, mut g) = worker_gradient(&mut oracle, &Batch::concat(&batches)?, kn as f64)?;
            for ((gi, wi), mi) in g
                .data_mut()
                .iter_mut()
                .zip(oracle.params().data())
                .zip(mask.data())
            {
                *gi += solver_cfg.weight_decay * mi * wi;
            }
            let lr = lr_at(&solver_cfg, kn, global, ipe);
            let mut w = oracle.params().data().to_vec();
            reference_step(&mut w, &mut u, g.data(), solver_cfg.momentum, lr);
            oracle.set_params(Tensor::from_vec(w))?;
            global += 1;
        }
    }
    let engine_dev = normwise(engine.params(), oracle.params())?;
    let ok = solver_dev <= 1e-10 && engine_dev <= 1e-10;
    Ok((
        ok,
        format!("solver deviation {solver_dev:.2e}, engine deviation {engine_dev:.2e}"),
    ))
}

fn check_constant_gradient(_: Option<Pitfall>) -> Result<(bool, String)> {
    let spec = ModelSpec {
        loss: LossKind::Linear,
        ..ModelSpec::logistic(4, 3)
    };
    let mut rng = Rng::new(5);
    let inputs = (0..32).map(|_| rng.below(9) as f64 - 4.0).collect();
    let labels = (0..8).map(|i| i % 3).collect();
    let batch = Batch::new(Tensor::new(inputs, vec![8, 4])?, labels)?;
    let eta = 0.0625;
    let run = |steps: usize, lr: f64| -> Result<Tensor> {
        let mut m = Model::zeroed(&spec)?;
        let mut s = Solver::new(&plain_solver(lr, 0.0, 0.0), m.param_count());
        for _ in 0..steps {
            let (_, g) = worker_gradient(&mut m, &batch, 8.0)?;
            let mut w = m.params().clone();
            s.step(&mut w, &g, lr)?;
            m.set_params(w)?;
        }
        Ok(m.params().clone())
    };
    let small = run(8, eta)?;
    let large = run(1, 8.0 * eta)?;
    let moved = small.data().iter().any(|&v| v != 0.0);
    let same = small
        .data()
        .iter()
        .zip(large.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        moved && same,
        format!("bitwise equal {same}, nonzero {moved}"),
    ))
}

fn check_weight_decay(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    let data = toy_data(8, 64)?;
    let spec = ModelSpec::mlp(5, &[8], 3, true);
    let model = init_model(&spec, 2, 1.0)?;
    let (lr, lambda) = (0.1, 0.01);
    let config = engine_config(4, 4, 2, pitfall)?;
    let ipe = config.iters_per_epoch(data.len());
    let step = |wd: f64| -> Result<Tensor> {
        let mut e = Engine::new(config.clone(), plain_solver(lr, 0.0, wd), model.clone())?;
        let plan = e.plan_epoch(1, 0, data.len())?;
        e.step(&data, &plan, 0, 0, ipe)?;
        Ok(e.params().clone())
    };
    let with = step(lambda)?;
    let without = step(0.0)?;
    let mask = model.decay_mask();
    let mut diff = without.clone();
    diff.add_scaled(-1.0, &with)?;
    let expected: Vec<f64> = model
        .params()
        .data()
        .iter()
        .zip(mask.data())
        .map(|(w, m)| lr * lambda * m * w)
        .collect();
    let dev = normwise(&diff, &Tensor::from_vec(expected))?;
    let bn_exempt = mask.data().contains(&0.0);
    Ok((
        dev <= 1e-9 && bn_exempt,
        format!("decay term deviation {dev:.2e}"),
    ))
}

fn check_mode_equivalence(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    let all = toy_data(21, 192)?;
    let (train_set, eval) = all.split_at(128)?;
    let spec = ModelSpec::mlp(5, &[8, 8], 3, true);
    let model = init_model(&spec, 4, 1.0)?;
    let run = |mode: ExecMode| -> Result<Vec<(f64, f64)>> {
        let setup = TrainSetup {
            train: train_set.clone(),
            eval: eval.clone(),
            model: model.clone(),
            solver: SolverConfig {
                warmup: Warmup::Gradual,
                warmup_epochs: 1,
                ref_kn: 16,
                milestones: vec![1],
                ..SolverConfig::default()
            },
            engine: EngineConfig {
                mode,
                epochs: 2,
                ..engine_config(4, 4, 2, pitfall)?
            },
            shuffle_seed: 6,
            comments: vec![],
        };
        Ok(train(setup)?
            .record
            .rows
            .iter()
            .map(|r| (r.train_loss, r.eval_loss))
            .collect())
    };
    let d = run(ExecMode::Distributed)?;
    let a = run(ExecMode::Accumulated)?;
    let worst = d
        .iter()
        .zip(&a)
        .map(|(x, y)| rel_diff(x.0, y.0).max(rel_diff(x.1, y.1)))
        .fold(0.0, f64::max);
    let ok = d.len() == a.len() && !d.is_empty() && worst <= 1e-9;
    Ok((
        ok,
        format!("{} iterations, max relative loss gap {worst:.2e}", d.len()),
    ))
}

fn check_epoch_consistency(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    let samples = 203;
    let n = 4;
    let spec = ModelSpec::logistic(5, 3);
    let model = init_model(&spec, 0, 1.0)?;
    let engine = Engine::new(
        engine_config(8, n, 1, pitfall)?,
        plain_solver(0.1, 0.0, 0.0),
        model,
    )?;
    let mut failures = 0;
    for seed in 0..5 {
        for epoch in 0..3 {
            let plan = engine.plan_epoch(seed, epoch, samples)?;
            if !epoch_consistent(&plan, seed, samples, n)? {
                failures += 1;
            }
        }
    }
    Ok((
        failures == 0,
        format!("{failures} of 15 epochs differ from the single-worker multiset"),
    ))
}

fn check_normalization(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    let data = toy_data(13, 64)?;
    let spec = ModelSpec::mlp(5, &[8], 3, false);
    let model = init_model(&spec, 9, 1.0)?;
    let lr = 0.1;
    let config = engine_config(4, 4, 1, pitfall)?;
    let ipe = config.iters_per_epoch(data.len());
    let solver = SolverConfig {
        base_lr: 0.025,
        ref_kn: 4,
        scaling: Scaling::Linear,
        ..plain_solver(0.025, 0.9, 0.0)
    };
    let mut engine = Engine::new(config.clone(), solver, model.clone())?;
    let plan = engine.plan_epoch(2, 0, data.len())?;
    let out = engine.step(&data, &plan, 0, 0, ipe)?;
    let batches = (0..config.k)
        .map(|j| data.batch(plan.batch_indices(j, 0, config.n)))
        .collect::<Result<Vec<_>>>()?;
    let mut oracle = model.clone();
    oracle.forward_loss(&Batch::concat(&batches)?, Mode::Train)?;
    let mean_grad = oracle.backward()?;
    let mut delta = model.params().clone();
    delta.add_scaled(-1.0, engine.params())?;
    let mut expected = mean_grad;
    expected.scale(lr);
    let dev = normwise(&delta, &expected)?;
    let lr_ok = out.lr == lr;
    Ok((
        dev <= 1e-10 && lr_ok,
        format!(
            "step deviation from lr * mean gradient {dev:.2e} (normalizer {})",
            loss_normalizer(&config)
        ),
    ))
}

fn check_allreduce_agreement(_: Option<Pitfall>) -> Result<(bool, String)> {
    let mut rng = Rng::new(31);
    let mut cases = 0;
    let mut bad = Vec::new();
    for p in 1..=9 {
        for len in [1, 7, 33] {
            let inputs: Vec<Tensor> = (0..p)
                .map(|_| {
                    Tensor::from_vec((0..len).map(|_| rng.below(2001) as f64 - 1000.0).collect())
                })
                .collect();
            let mut expect = vec![0.0; len];
            for t in &inputs {
                for (e, v) in expect.iter_mut().zip(t.data()) {
                    *e += v;
                }
            }
            let topo = Topology::new(p, 1)?;
            for algo in Algorithm::ALL {
                if algo == Algorithm::HalvingDoubling && !p.is_power_of_two() {
                    continue;
                }
                let (out, _) = allreduce(algo, &topo, &inputs, TransportKind::Simulated)?;
                cases += 1;
                if out.iter().any(|o| o.data() != expect.as_slice()) {
                    bad.push(format!("{algo} p={p} len={len}"));
                }
            }
        }
    }
    Ok((
        bad.is_empty(),
        format!("{cases} cases, mismatches: {bad:?}"),
    ))
}

fn check_traffic(_: Option<Pitfall>) -> Result<(bool, String)> {
    let mut bad = Vec::new();
    for p in 1..=9usize {
        let len = 16 * p;
        let inputs: Vec<Tensor> = (0..p)
            .map(|r| Tensor::from_vec(vec![r as f64; len]))
            .collect();
        let topo = Topology::new(p, 1)?;
        let b = (len as u64 * ELEM_BYTES) as f64;
        let mut algos = vec![(Algorithm::Ring, 2 * (p - 1))];
        if p.is_power_of_two() {
            algos.push((Algorithm::HalvingDoubling, 2 * p.trailing_zeros() as usize));
        }
        for (algo, steps) in algos {
            let (_, report) = allreduce(algo, &topo, &inputs, TransportKind::Simulated)?;
            let payload = report.max_payload_sent() as f64;
            if report.max_steps() != steps || payload != predict_bytes(p, b) {
                bad.push(format!(
                    "{algo} p={p}: {} steps, {payload} bytes",
                    report.max_steps()
                ));
            }
        }
    }
    Ok((bad.is_empty(), format!("mismatches: {bad:?}")))
}

fn check_pipeline(_: Option<Pitfall>) -> Result<(bool, String)> {
    let p = 4;
    let mut rng = Rng::new(8);
    let tasks: Vec<PipelineTask> = [5usize, 12, 3, 20, 9]
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let algo = if i % 2 == 0 {
                Algorithm::Ring
            } else {
                Algorithm::BinaryBlocks
            };
            Ok(PipelineTask {
                schedule: Arc::new(build_schedule(algo, p, len)?),
                inputs: (0..p)
                    .map(|_| (0..len).map(|_| rng.below(100) as f64).collect())
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    let sequential = run_pipeline(
        &pipeline_schedule(tasks.len(), 1)?,
        tasks.clone(),
        Interleaving::Sweep,
        None,
    )?;
    let mut runs = 0;
    for c in 1..=4 {
        let plan = pipeline_schedule(tasks.len(), c)?;
        for seed in 0..10 {
            let out = run_pipeline(&plan, tasks.clone(), Interleaving::Random(seed), None)?;
            runs += 1;
            if out.outputs != sequential.outputs {
                return Ok((
                    false,
                    format!("window {c}, seed {seed} differs from sequential"),
                ));
            }
        }
    }
    Ok((true, format!("{runs} random interleavings match")))
}

fn check_gradients(_: Option<Pitfall>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut failed = 0;
    for seed in 0..6 {
        let (model, batch) = gradcheck_instance(seed)?;
        let r = gradient_check(&model, &batch)?;
        worst = worst.max(r.max_rel);
        if !r.passed() {
            failed += 1;
        }
    }
    Ok((failed == 0, format!("max relative error {worst:.2e}")))
}

fn check_residual_identity(_: Option<Pitfall>) -> Result<(bool, String)> {
    let spec = ModelSpec {
        input_dim: 6,
        hidden: vec![],
        residual_blocks: 2,
        batch_norm: true,
        classes: 3,
        loss: LossKind::CrossEntropy,
    };
    let mut m = init_model(&spec, 3, 0.0)?;
    let (_, batch) = gradcheck_instance(2)?;
    let mut rng = Rng::new(1);
    let inputs = Tensor::new(
        (0..6 * batch.len()).map(|_| rng.normal()).collect(),
        vec![batch.len(), 6],
    )?;
    let b = Batch::new(inputs, batch.labels.iter().map(|l| l % 3).collect())?;
    let f = m.features(&b, Mode::Train)?;
    let identity = f.data() == b.inputs.data();
    Ok((
        identity,
        format!("zero-gamma blocks pass inputs through: {identity}"),
    ))
}

fn check_replicas(pitfall: Option<Pitfall>) -> Result<(bool, String)> {
    let data = toy_data(4, 256)?;
    let spec = ModelSpec::mlp(5, &[8], 3, true);
    let model = init_model(&spec, 12, 1.0)?;
    let config = EngineConfig {
        check_replicas: false,
        algo: Algorithm::BinaryBlocks,
        ..engine_config(8, 4, 2, pitfall)?
    };
    let ipe = config.iters_per_epoch(data.len());
    let mut engine = Engine::new(config, SolverConfig::default(), model)?;
    let plan = engine.plan_epoch(3, 0, data.len())?;
    for iter in 0..ipe {
        engine.step(&data, &plan, iter, iter, ipe)?;
    }
    let sums: Vec<u64> = engine
        .workers()
        .iter()
        .map(|w| w.model.params().checksum())
        .collect();
    let ok = sums.iter().all(|&s| s == sums[0]);
    Ok((
        ok,
        format!("{} replicas after {ipe} steps agree: {ok}", sums.len()),
    ))
}

fn check_bandwidth(_: Option<Pitfall>) -> Result<(bool, String)> {
    let r = cost_report(CostQuery {
        params: 25e6,
        bytes_per_param: 4.0,
        backprop_seconds: 0.125,
        servers: 32,
        link_bits: Some(50e9),
    })?;
    let headline = r.headline();
    let ok = headline == "100MB parameters, 12.8 Gbit/s peak"
        && r.verdict() == Some(Verdict::Sufficient);
    Ok((ok, headline))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_without_pitfalls() {
        let failed: Vec<_> = run_suite(None).into_iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    fn failures(p: Pitfall) -> Vec<&'static str> {
        run_suite(Some(p))
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect()
    }

    #[test]
    fn momentum_pitfall_fails_exactly_one_check() {
        assert_eq!(
            failures(Pitfall::NoMomentumCorrection),
            ["momentum-equivalence"]
        );
    }

    #[test]
    fn shuffle_pitfall_fails_epoch_consistency() {
        assert_eq!(failures(Pitfall::PerWorkerShuffle), ["epoch-consistency"]);
    }

    #[test]
    fn normalization_pitfalls_are_caught() {
        assert!(failures(Pitfall::NormalizeByN).contains(&"normalization"));
        assert!(!failures(Pitfall::ScaleLoss).is_empty());
    }

    #[test]
    fn gradient_check_accepts_analytic_gradients() {
        let (model, batch) = gradcheck_instance(4).unwrap();
        assert!(gradient_check(&model, &batch).unwrap().passed());
        let spec = ModelSpec::mlp(3, &[4], 2, true);
        let m = init_model(&spec, 1, 1.0).unwrap();
        let b = Batch::new(
            Tensor::new(
                vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5, 0.3, 0.2, -2.0],
                vec![3, 3],
            )
            .unwrap(),
            vec![0, 1, 0],
        )
        .unwrap();
        let r = gradient_check(&m, &b).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn check_names_are_unique() {
        let mut names: Vec<_> = CHECKS.iter().map(|c| c.0).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }
}
