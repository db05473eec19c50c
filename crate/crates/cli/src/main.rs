use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mbsgd_core::collectives::bench::{bench_allreduce, write_bench_csv};
use mbsgd_core::config::Seeds;
use mbsgd_core::verify::run_suite;
use mbsgd_core::{
    cost_report, train, Algorithm, CostModel, CostQuery, ExperimentConfig, Pitfall, TrainRecord,
    TransportKind,
};

#[derive(Parser)]
#[command(
    name = "mbsgd",
    version,
    about = "Large-minibatch synchronous SGD laboratory"
)]
struct Cli {
    /// Default for every seed not set by the config or `--set`.
    #[arg(long, env = "MBSGD_SEED", global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the per-iteration CSV.
    Train(TrainArgs),
    /// Time allreduce algorithms on random buffers.
    Bench(BenchArgs),
    /// Bandwidth needed to overlap one allreduce per backward pass.
    CostReport(CostArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Inject a known mistake into the engine.
    #[arg(long)]
    pitfall: Option<Pitfall>,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Algorithms: ring, hd, blocks.
    #[arg(long, value_delimiter = ',', default_value = "ring,hd,blocks")]
    algo: Vec<Algorithm>,
    /// Server counts.
    #[arg(long = "p", value_delimiter = ',', default_value = "2,4,8")]
    servers: Vec<usize>,
    /// Per-server buffer sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "1024,1048576")]
    sizes: Vec<u64>,
    #[arg(long, default_value = "simulated")]
    transport: TransportKind,
    /// Append predicted steps, payload and cost-model seconds.
    #[arg(long)]
    analytic: bool,
    /// Seconds per communication round in the cost model.
    #[arg(long, default_value_t = CostModel::default().latency)]
    latency: f64,
    /// Bytes per second in the cost model.
    #[arg(long, default_value_t = CostModel::default().bandwidth)]
    bandwidth: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    params: f64,
    #[arg(long, default_value_t = 4.0)]
    bytes_per_param: f64,
    /// Time of one backward pass.
    #[arg(long)]
    backprop_seconds: f64,
    #[arg(long = "p", default_value_t = 1)]
    servers: usize,
    /// Link rate to judge, in Gbit/s.
    #[arg(long)]
    link_gbit: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    pitfall: Option<Pitfall>,
}

fn load_config(args: &TrainArgs, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(s) = seed {
        cfg.seeds = Seeds::all(s);
    }
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&text)?;
    }
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    if let Some(p) = args.pitfall {
        cfg.engine.pitfall = Some(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn lr_summary(record: &TrainRecord) -> String {
    let lrs = record.column(|r| r.lr);
    let Some((&first, &last)) = lrs.first().zip(lrs.last()) else {
        return "lr: no iterations".into();
    };
    let (peak_iter, peak) =
        lrs.iter().enumerate().fold(
            (0, f64::MIN),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        );
    let drops: Vec<String> = lrs
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] < w[0])
        .map(|(i, _)| (i + 1).to_string())
        .collect();
    format!(
        "lr: start {first}, peak {peak} at iter {peak_iter}, end {last}; drops at iters [{}]",
        drops.join(", ")
    )
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(args, seed)?;
    if args.dry_run {
        print!("{}", cfg.serialize());
        return Ok(());
    }
    let out = train(cfg.train_setup()?)?;
    let path = Path::new(&cfg.output);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    out.record.write_csv(&mut w)?;
    w.flush()?;
    let last = out.record.last().context("no iterations were run")?;
    println!("wrote {} rows to {}", out.record.rows.len(), path.display());
    println!(
        "final train loss {:.6}, eval loss {:.6}",
        last.train_loss, last.eval_loss
    );
    println!("{}", lr_summary(&out.record));
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: Option<u64>) -> Result<()> {
    let cost = CostModel {
        latency: args.latency,
        bandwidth: args.bandwidth,
    };
    let seed = seed.unwrap_or(0);
    let mut rows = Vec::new();
    for &algo in &args.algo {
        for &p in &args.servers {
            for &size in &args.sizes {
                let row = bench_allreduce(algo, p, size, args.transport, cost, seed)
                    .with_context(|| format!("{algo} on p={p}, {size} bytes"))?;
                rows.push(row);
            }
        }
    }
    let comments = vec![
        format!("transport = {}", args.transport),
        format!("seed = {seed}"),
    ];
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(
                File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            write_bench_csv(&rows, &comments, args.analytic, &mut w)?;
            w.flush()?;
        }
        None => write_bench_csv(&rows, &comments, args.analytic, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_cost_report(args: &CostArgs) -> Result<()> {
    let report = cost_report(CostQuery {
        params: args.params,
        bytes_per_param: args.bytes_per_param,
        backprop_seconds: args.backprop_seconds,
        servers: args.servers,
        link_bits: args.link_gbit.map(|g| g * 1e9),
    })?;
    print!("{report}");
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let results = run_suite(args.pitfall);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if !failed.is_empty() {
        bail!("{} check(s) failed: {}", failed.len(), failed.join(", "));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed),
        Command::CostReport(a) => cmd_cost_report(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
