use super::*;
use crate::data::make_synthetic;
use crate::models::{init_model, LossKind, ModelSpec};
use crate::numerics::rel_diff;
use crate::solver::Warmup;

fn dataset(samples: usize, integer: bool) -> Dataset {
    let d = make_synthetic(17, samples, 6, 3, 3.0).unwrap();
    if integer {
        d.rounded()
    } else {
        d
    }
}

fn bn_mlp() -> Model {
    let spec = ModelSpec {
        residual_blocks: 1,
        ..ModelSpec::mlp(6, &[8, 8], 3, true)
    };
    init_model(&spec, 3, 0.0).unwrap()
}

fn plain_mlp() -> Model {
    init_model(&ModelSpec::mlp(6, &[8], 3, false), 4, 1.0).unwrap()
}

fn engine_cfg(p: usize, g: usize, n: usize, mode: ExecMode) -> EngineConfig {
    EngineConfig {
        k: p * g,
        n,
        topology: Topology::new(p, g).unwrap(),
        algo: Algorithm::BinaryBlocks,
        mode,
        epochs: 2,
        ..EngineConfig::default()
    }
}

fn solver_cfg() -> SolverConfig {
    SolverConfig {
        base_lr: 0.05,
        ref_kn: 32,
        momentum: 0.9,
        weight_decay: 1e-4,
        milestones: vec![1],
        warmup: Warmup::Gradual,
        warmup_epochs: 1,
        ..SolverConfig::default()
    }
}

/// Largest elementwise difference relative to the largest magnitude, so
/// that parameters sitting at rounding-noise level do not dominate.
fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.max_abs_diff(b).unwrap() / scale
}

fn run_steps(engine: &mut Engine, data: &Dataset, steps: usize) -> Vec<StepOutcome> {
    let ipe = engine.config().iters_per_epoch(data.len());
    let mut out = Vec::new();
    let mut global = 0;
    'outer: for epoch in 0.. {
        let plan = engine.plan_epoch(5, epoch, data.len()).unwrap();
        for iter in 0..ipe {
            if global == steps {
                break 'outer;
            }
            out.push(engine.step(data, &plan, iter, global, ipe).unwrap());
            global += 1;
        }
    }
    out
}

#[test]
fn single_worker_gradient_is_plain_backward() {
    let data = dataset(64, false);
    let batch = data.batch(&[0, 5, 9, 11]).unwrap();
    let mut a = plain_mlp();
    let mut b = plain_mlp();
    let (_, g) = worker_gradient(&mut a, &batch, 4.0).unwrap();
    b.forward_loss(&batch, Mode::Train).unwrap();
    assert_eq!(g, b.backward().unwrap());
}

#[test]
fn duplicated_batches_cancel() {
    let data = dataset(64, false);
    let batch = data.batch(&[1, 2, 3]).unwrap();
    let mut m = plain_mlp();
    let (_, g1) = worker_gradient(&mut m, &batch, 6.0).unwrap();
    let (_, g2) = worker_gradient(&mut m, &batch, 6.0).unwrap();
    let sum = local_reduce(&[g1, g2]).unwrap();
    let (_, single) = worker_gradient(&mut m, &batch, 3.0).unwrap();
    assert!(max_rel(&sum, &single) < 1e-15);
}

#[test]
fn disjoint_shards_sum_to_monolithic_gradient() {
    let data = dataset(96, false);
    let (k, n) = (6, 4);
    let plan = epoch_shards(8, 0, data.len(), k).unwrap();
    let mut m = plain_mlp();
    let grads: Vec<Tensor> = (0..k)
        .map(|j| {
            let b = data.batch(plan.batch_indices(j, 2, n)).unwrap();
            worker_gradient(&mut m, &b, (k * n) as f64).unwrap().1
        })
        .collect();
    let topo = Topology::new(3, 2).unwrap();
    let (out, _) = crate::collectives::hierarchical_allreduce(
        Algorithm::BinaryBlocks,
        &topo,
        &grads,
        TransportKind::Simulated,
        1,
    )
    .unwrap();
    let all: Vec<usize> = (0..k)
        .flat_map(|j| plan.batch_indices(j, 2, n).to_vec())
        .collect();
    let big = data.batch(&all).unwrap();
    m.forward_loss(&big, Mode::Train).unwrap();
    let mono = m.backward().unwrap();
    for o in &out {
        assert!(max_rel(o, &mono) < 1e-12);
    }
}

#[test]
fn constant_gradient_small_steps_equal_one_large_step() {
    let data = dataset(64, true);
    let spec = ModelSpec {
        loss: LossKind::Linear,
        ..ModelSpec::logistic(6, 3)
    };
    // Zero weights keep every intermediate a short dyadic rational.
    let model = Model::zeroed(&spec).unwrap();
    let (k, n) = (8, 4);
    let eta = 0.0625;
    let solver = SolverConfig {
        base_lr: eta,
        ref_kn: n,
        momentum: 0.0,
        weight_decay: 0.0,
        milestones: vec![],
        ..SolverConfig::default()
    };
    let plan = epoch_shards(3, 0, data.len(), k).unwrap();
    let mut small = model.clone();
    let mut small_solver = Solver::new(&solver, model.param_count());
    for j in 0..k {
        let b = data.batch(plan.batch_indices(j, 0, n)).unwrap();
        let (_, g) = worker_gradient(&mut small, &b, n as f64).unwrap();
        let mut w = small.params().clone();
        small_solver.step(&mut w, &g, eta).unwrap();
        small.set_params(w).unwrap();
    }
    let mut engine =
        Engine::new(engine_cfg(2, 4, n, ExecMode::Distributed), solver, model).unwrap();
    let out = engine.step(&data, &plan, 0, 0, 1).unwrap();
    assert_eq!(out.lr, 8.0 * eta);
    let big = engine.params();
    assert!(big
        .data()
        .iter()
        .zip(small.params().data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn cross_entropy_large_step_differs_from_small_steps() {
    let data = dataset(64, false);
    let model = init_model(&ModelSpec::logistic(6, 3), 1, 1.0).unwrap();
    let (k, n) = (4, 4);
    let solver = SolverConfig {
        base_lr: 0.5,
        ref_kn: n,
        momentum: 0.0,
        weight_decay: 0.0,
        milestones: vec![],
        ..SolverConfig::default()
    };
    let plan = epoch_shards(3, 0, data.len(), k).unwrap();
    let mut small = model.clone();
    for j in 0..k {
        let b = data.batch(plan.batch_indices(j, 0, n)).unwrap();
        let (_, g) = worker_gradient(&mut small, &b, n as f64).unwrap();
        small.params_mut().add_scaled(-0.5, &g).unwrap();
    }
    let mut engine =
        Engine::new(engine_cfg(4, 1, n, ExecMode::Distributed), solver, model).unwrap();
    engine.step(&data, &plan, 0, 0, 1).unwrap();
    assert!(engine.params().max_abs_diff(small.params()).unwrap() > 1e-6);
}

#[test]
fn full_batch_single_worker_is_gradient_descent() {
    let data = dataset(24, false);
    let model = plain_mlp();
    let solver = SolverConfig {
        base_lr: 0.1,
        ref_kn: 24,
        momentum: 0.0,
        weight_decay: 0.01,
        milestones: vec![],
        ..SolverConfig::default()
    };
    let mut manual = model.clone();
    let mut engine =
        Engine::new(engine_cfg(1, 1, 24, ExecMode::Distributed), solver, model).unwrap();
    let plan = engine.plan_epoch(2, 0, 24).unwrap();
    engine.step(&data, &plan, 0, 0, 1).unwrap();
    manual
        .forward_loss(&data.full_batch().unwrap(), Mode::Train)
        .unwrap();
    let g = manual.backward().unwrap();
    let mut w = manual.params().clone();
    for ((wv, gv), m) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(manual.decay_mask().data())
    {
        *wv -= 0.1 * (gv + 0.01 * m * *wv);
    }
    let r = max_rel(engine.params(), &w);
    assert!(r < 1e-15, "{r}");
}

#[test]
fn accumulated_matches_distributed() {
    let data = dataset(512, false);
    let dist_cfg = engine_cfg(2, 4, 4, ExecMode::Distributed);
    let acc_cfg = EngineConfig {
        mode: ExecMode::Accumulated,
        ..dist_cfg.clone()
    };
    let mut d = Engine::new(dist_cfg, solver_cfg(), bn_mlp()).unwrap();
    let mut a = Engine::new(acc_cfg, solver_cfg(), bn_mlp()).unwrap();
    let rd = run_steps(&mut d, &data, 10);
    let ra = run_steps(&mut a, &data, 10);
    let r = max_rel(d.params(), a.params());
    assert!(r < 1e-10, "{r}");
    for (x, y) in rd.iter().zip(&ra) {
        assert_eq!(x.lr, y.lr);
        assert!(rel_diff(x.train_loss, y.train_loss) < 1e-10);
    }
}

#[test]
fn accumulation_is_bitwise_up_to_two_servers() {
    // Per-server sums associate identically, and a two-party sum commutes.
    let data = dataset(256, false);
    for servers in [1, 2] {
        let dist_cfg = engine_cfg(servers, 8 / servers, 4, ExecMode::Distributed);
        let acc_cfg = EngineConfig {
            mode: ExecMode::Accumulated,
            ..dist_cfg.clone()
        };
        let mut d = Engine::new(dist_cfg, solver_cfg(), bn_mlp()).unwrap();
        let mut a = Engine::new(acc_cfg, solver_cfg(), bn_mlp()).unwrap();
        run_steps(&mut d, &data, 12);
        run_steps(&mut a, &data, 12);
        assert_eq!(d.params(), a.params(), "servers = {servers}");
    }
}

#[test]
fn single_worker_modes_coincide() {
    let data = dataset(64, false);
    let cfg = engine_cfg(1, 1, 8, ExecMode::Distributed);
    let mut d = Engine::new(cfg.clone(), solver_cfg(), bn_mlp()).unwrap();
    let mut a = Engine::new(
        EngineConfig {
            mode: ExecMode::Accumulated,
            ..cfg
        },
        solver_cfg(),
        bn_mlp(),
    )
    .unwrap();
    run_steps(&mut d, &data, 6);
    run_steps(&mut a, &data, 6);
    assert_eq!(d.params(), a.params());
}

#[test]
fn replicas_stay_identical_and_divergence_is_caught() {
    let data = dataset(128, false);
    let mut e = Engine::new(
        engine_cfg(2, 2, 4, ExecMode::Distributed),
        solver_cfg(),
        bn_mlp(),
    )
    .unwrap();
    run_steps(&mut e, &data, 5);
    let sum = e.params().checksum();
    assert!(e
        .workers()
        .iter()
        .all(|w| w.model.params().checksum() == sum));
    e.workers_mut()[3].model.params_mut().data_mut()[0] += 1e-12;
    let plan = e.plan_epoch(5, 0, data.len()).unwrap();
    assert_eq!(
        e.step(&data, &plan, 0, 5, 8).unwrap_err(),
        Error::ReplicaDivergence { iter: 5 }
    );
}

#[test]
fn transports_give_identical_updates() {
    let data = dataset(128, false);
    let mut results = Vec::new();
    for transport in [
        TransportKind::Simulated,
        TransportKind::Channel,
        TransportKind::Tcp,
    ] {
        let cfg = EngineConfig {
            transport,
            algo: Algorithm::Ring,
            ..engine_cfg(3, 2, 4, ExecMode::Distributed)
        };
        let mut e = Engine::new(cfg, solver_cfg(), bn_mlp()).unwrap();
        run_steps(&mut e, &data, 3);
        results.push(e.params().clone());
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0], results[2]);
}

#[test]
fn pipeline_window_does_not_change_results() {
    let data = dataset(128, false);
    let mut results = Vec::new();
    for c in [1, 2, 3, 100] {
        let cfg = EngineConfig {
            pipeline_window: c,
            ..engine_cfg(4, 1, 4, ExecMode::Distributed)
        };
        let mut e = Engine::new(cfg, solver_cfg(), bn_mlp()).unwrap();
        run_steps(&mut e, &data, 3);
        results.push(e.params().clone());
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn traffic_is_reported_per_bucket() {
    let data = dataset(128, false);
    let mut e = Engine::new(
        engine_cfg(4, 2, 4, ExecMode::Distributed),
        solver_cfg(),
        plain_mlp(),
    )
    .unwrap();
    let out = run_steps(&mut e, &data, 1);
    assert_eq!(e.last_traffic().len(), e.buckets().len());
    assert!(out[0].comm_seconds > 0.0);
    let total: usize = e.buckets().iter().map(|b| b.len()).sum();
    assert_eq!(total, e.params().len());
}

#[test]
fn topology_must_match_worker_count() {
    let cfg = EngineConfig {
        k: 6,
        ..engine_cfg(2, 4, 4, ExecMode::Distributed)
    };
    match cfg.validate() {
        Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "engine.k"),
        other => panic!("{other:?}"),
    }
    let acc = EngineConfig {
        k: 6,
        mode: ExecMode::Accumulated,
        ..engine_cfg(2, 4, 4, ExecMode::Distributed)
    };
    assert!(acc.validate().is_ok());
    let hd = EngineConfig {
        algo: Algorithm::HalvingDoubling,
        ..engine_cfg(3, 1, 4, ExecMode::Distributed)
    };
    assert_eq!(hd.validate(), Err(Error::NotPowerOfTwo(3)));
}

fn setup(engine: EngineConfig, solver: SolverConfig, model: Model, data: Dataset) -> TrainSetup {
    TrainSetup {
        eval: make_synthetic(99, 64, data.dim(), 3, 3.0).unwrap(),
        train: data,
        model,
        solver,
        engine,
        shuffle_seed: 7,
        comments: vec![],
    }
}

#[test]
fn zero_lr_freezes_training() {
    let data = dataset(64, false);
    let model = init_model(&ModelSpec::mlp(6, &[8], 3, false), 2, 1.0).unwrap();
    let solver = SolverConfig {
        base_lr: 0.0,
        ..solver_cfg()
    };
    let out = train(setup(
        engine_cfg(2, 2, 4, ExecMode::Distributed),
        solver,
        model.clone(),
        data,
    ))
    .unwrap();
    assert_eq!(out.engine.params(), model.params());
    let eval = out.record.column(|r| r.eval_loss);
    assert!(eval.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn nan_loss_aborts_with_iteration() {
    let mut data = dataset(64, false);
    data.inputs
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = f64::NAN);
    let model = init_model(&ModelSpec::logistic(6, 3), 1, 1.0).unwrap();
    let err = train(setup(
        engine_cfg(2, 2, 4, ExecMode::Distributed),
        solver_cfg(),
        model,
        data,
    ))
    .err()
    .unwrap();
    assert_eq!(err, Error::NonFiniteLoss { iter: 0 });
}

#[test]
fn separable_training_learns() {
    let data = make_synthetic(4, 256, 6, 2, 6.0).unwrap();
    let model = init_model(&ModelSpec::logistic(6, 2), 1, 1.0).unwrap();
    let solver = SolverConfig {
        base_lr: 0.1,
        ref_kn: 16,
        milestones: vec![],
        ..SolverConfig::default()
    };
    let mut cfg = engine_cfg(2, 2, 4, ExecMode::Distributed);
    cfg.epochs = 3;
    let mut s = setup(cfg, solver, model, data);
    s.eval = make_synthetic(4, 256, 6, 2, 6.0).unwrap();
    let out = train(s).unwrap();
    let rec = &out.record;
    assert_eq!(rec.rows.len(), 3 * 16);
    assert!(rec.final_train_loss().unwrap() < std::f64::consts::LN_2);
    assert!(rec.rows.windows(2).all(|w| w[0].iter < w[1].iter));
}

#[test]
fn train_modes_agree_and_runs_repeat() {
    let data = dataset(256, false);
    let cfg = engine_cfg(2, 4, 4, ExecMode::Distributed);
    let a = train(setup(cfg.clone(), solver_cfg(), bn_mlp(), data.clone())).unwrap();
    let b = train(setup(cfg.clone(), solver_cfg(), bn_mlp(), data.clone())).unwrap();
    assert_eq!(a.record.to_csv_string(), b.record.to_csv_string());
    let acc = train(setup(
        EngineConfig {
            mode: ExecMode::Accumulated,
            ..cfg
        },
        solver_cfg(),
        bn_mlp(),
        data,
    ))
    .unwrap();
    for (x, y) in a.record.rows.iter().zip(&acc.record.rows) {
        assert!(rel_diff(x.train_loss, y.train_loss) < 1e-9);
        assert!(rel_diff(x.eval_loss, y.eval_loss) < 1e-9);
    }
}

#[test]
fn normalize_by_n_scales_the_update() {
    let data = dataset(64, false);
    let solver = SolverConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        warmup: Warmup::None,
        ..solver_cfg()
    };
    let base = plain_mlp();
    let mut good = Engine::new(
        engine_cfg(4, 1, 4, ExecMode::Distributed),
        solver.clone(),
        base.clone(),
    )
    .unwrap();
    let mut bad = Engine::new(
        EngineConfig {
            pitfall: Some(Pitfall::NormalizeByN),
            ..engine_cfg(4, 1, 4, ExecMode::Distributed)
        },
        solver,
        base.clone(),
    )
    .unwrap();
    run_steps(&mut good, &data, 1);
    run_steps(&mut bad, &data, 1);
    for ((g, b), w) in good
        .params()
        .data()
        .iter()
        .zip(bad.params().data())
        .zip(base.params().data())
    {
        let dg = g - w;
        let db = b - w;
        assert!((db - 4.0 * dg).abs() <= 1e-14 * (w.abs() + db.abs()));
    }
}

#[test]
fn scale_loss_pitfall_changes_trajectory() {
    let data = dataset(64, false);
    let good_cfg = engine_cfg(4, 1, 4, ExecMode::Distributed);
    let mut good = Engine::new(good_cfg.clone(), solver_cfg(), plain_mlp()).unwrap();
    let mut bad = Engine::new(
        EngineConfig {
            pitfall: Some(Pitfall::ScaleLoss),
            ..good_cfg
        },
        solver_cfg(),
        plain_mlp(),
    )
    .unwrap();
    run_steps(&mut good, &data, 6);
    run_steps(&mut bad, &data, 6);
    assert!(max_rel(good.params(), bad.params()) > 1e-6);
}

#[test]
fn pitfall_names_parse() {
    for p in Pitfall::ALL {
        assert_eq!(p.name().parse::<Pitfall>().unwrap(), p);
    }
    assert!("bogus".parse::<Pitfall>().is_err());
    assert_eq!(
        "accumulated".parse::<ExecMode>().unwrap(),
        ExecMode::Accumulated
    );
}
