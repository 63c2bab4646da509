use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dagkit::bench::{backend_crossover, bound_check, bound_check_tree, scaling_curve, TimingConfig};
use dagkit::generate::{gen, gen_dataset, GeneratorSpec};
use dagkit::io::{dataset_stats, load_edge_list, save_edge_list};
use dagkit::model::{random_stack_grad_check, stack_forward, GradCheckSetup};
use dagkit::ppr::support_check;
use dagkit::rng::SplitMix64;
use dagkit::trainer::{history_csv, train, TrainConfig};
use dagkit::{checkpoint, Backend, Bound, GraphContext, ReachabilityIndex, ReadoutMode, Task};

/// Transformers on directed acyclic graphs: validation, reachability, attention,
/// training and complexity benchmarks.
#[derive(Parser)]
#[command(name = "dagkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that an edge-list file describes a DAG.
    Validate { file: PathBuf },
    /// Size, depth, maximum outdegree and receptive-field sizes.
    Stats {
        file: PathBuf,
        #[arg(long, default_value = "inf")]
        k: Bound,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Build the receptive-field index and write it to a file.
    Reach {
        file: PathBuf,
        #[arg(long, default_value = "inf")]
        k: Bound,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trained stack on a graph and print its outputs.
    Forward {
        file: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendArg::Sparse)]
        backend: BackendArg,
        #[arg(long, default_value = "inf")]
        k: Bound,
        /// Skip the depth positional encodings.
        #[arg(long)]
        no_pe: bool,
        #[arg(long, value_enum, default_value_t = TaskArg::Node)]
        task: TaskArg,
        #[arg(long, value_enum, default_value_t = ReadoutArg::Mean)]
        readout: ReadoutArg,
    },
    /// Train on generated or loaded graphs; writes a loss history and a checkpoint.
    Train(TrainArgs),
    /// Check that personalized PageRank mass vanishes exactly off the root's ancestors and descendants.
    PprCheck {
        file: PathBuf,
        #[arg(long)]
        root: usize,
        #[arg(long, default_value_t = dagkit::ppr::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Complexity measurements.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Compare stack gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long = "dmodel", default_value_t = 8)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Nodes in the random graph.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, value_enum, default_value_t = BackendArg::Sparse)]
        backend: BackendArg,
        #[arg(long, value_enum, default_value_t = TaskArg::Node)]
        task: TaskArg,
    },
    /// Write a generated graph as an edge-list file.
    Gen {
        /// `<tree|layered|chain>[,n=..][,d=..][,seed=..][,outdeg=..][,layers=..][,p=..]`
        spec: GeneratorSpec,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Generator spec for synthetic graphs.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    gen: Option<GeneratorSpec>,
    /// Directory of edge-list files, read in file-name order.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `key=value` training configuration.
    #[arg(long)]
    cfg: PathBuf,
    /// Number of generated graphs.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Inclusive size range `lo:hi` for generated graphs.
    #[arg(long, value_parser = parse_range)]
    n_range: Option<(usize, usize)>,
    #[arg(long, default_value = "history.csv")]
    history: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    ckpt: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Σ|N_k(v)| against |V|·min(k, depth)·Δ⁺ on random trees.
    Bound {
        #[arg(long, default_value_t = 100)]
        trees: usize,
        /// Tree sizes are drawn from 1..=n-max.
        #[arg(long, default_value_t = 512)]
        n_max: usize,
        #[arg(long, default_value_t = 2)]
        outdeg: usize,
        #[arg(long, default_value = "inf")]
        k: Bound,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attention wall-clock time over growing graphs.
    Scale {
        #[command(flatten)]
        timing: TimingArgs,
        #[arg(long, value_enum, default_value_t = BackendArg::Sparse)]
        backend: BackendArg,
    },
    /// Dense and sparse backends side by side.
    Crossover {
        #[command(flatten)]
        timing: TimingArgs,
    },
}

#[derive(Args)]
struct TimingArgs {
    /// Graph family as a generator spec; its `n` and `d` are ignored.
    #[arg(long, default_value = "tree,outdeg=2")]
    family: GeneratorSpec,
    /// Comma-separated ascending sizes.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    sizes: Vec<usize>,
    #[arg(long, default_value = "inf")]
    k: Bound,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long = "dmodel", default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Kv,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Dense,
    Sparse,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Dense => Backend::Dense,
            BackendArg::Sparse => Backend::Sparse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Node,
    Graph,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReadoutArg {
    Mean,
    Sinks,
}

fn task_of(task: TaskArg, readout: ReadoutArg) -> Task {
    match (task, readout) {
        (TaskArg::Node, _) => Task::Node,
        (TaskArg::Graph, ReadoutArg::Mean) => Task::Graph(ReadoutMode::Mean),
        (TaskArg::Graph, ReadoutArg::Sinks) => Task::Graph(ReadoutMode::Sinks),
    }
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo = lo.trim().parse().map_err(|_| format!("bad lower bound `{lo}`"))?;
    let hi = hi.trim().parse().map_err(|_| format!("bad upper bound `{hi}`"))?;
    Ok((lo, hi))
}

fn load(path: &Path) -> Result<dagkit::Dag> {
    load_edge_list(path).with_context(|| format!("{}", path.display()))
}

fn load_dir(dir: &Path) -> Result<Vec<dagkit::Dag>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("{}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    if files.is_empty() {
        bail!("{}: no graph files", dir.display());
    }
    files.iter().map(|p| load(p)).collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { file } => {
            let g = load(&file)?;
            println!("ok n={} edges={} depth={} sources={} sinks={}", g.n(), g.edge_count(), g.depth().dag_depth, g.sources().len(), g.sinks().len());
        }
        Command::Stats { file, k, format } => {
            let stats = dataset_stats(&load(&file)?, k);
            match format {
                Format::Table => print!("{stats}"),
                Format::Kv | Format::Csv => print!("{}", stats.to_key_values()),
            }
        }
        Command::Reach { file, k, out } => {
            let g = load(&file)?;
            let threads = dagkit::threads_from_env(dagkit::available_threads());
            let idx = ReachabilityIndex::build_parallel(&g, k, threads);
            fs::write(&out, idx.to_text()).with_context(|| format!("{}", out.display()))?;
            let stats = idx.stats();
            println!("wrote {} n={} k={} total_n_k={} avg_n_k={}", out.display(), stats.n, k, stats.total, stats.avg_display());
        }
        Command::Forward { file, ckpt, backend, k, no_pe, task, readout } => {
            let g = load(&file)?;
            let stack = checkpoint::load_stack(&ckpt).with_context(|| format!("{}", ckpt.display()))?;
            let idx = ReachabilityIndex::build(&g, k);
            let ctx = GraphContext::new(&g, &idx, backend.into(), stack.shape().d_model)?;
            let out = stack_forward(&stack, &ctx, !no_pe, task_of(task, readout))?;
            for row in out.rows() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
                println!("{}", cells.join(" "));
            }
        }
        Command::Train(args) => {
            let text = fs::read_to_string(&args.cfg).with_context(|| format!("{}", args.cfg.display()))?;
            let cfg = TrainConfig::parse(&text)?;
            let data = match (&args.gen, &args.data) {
                (Some(spec), _) => gen_dataset(spec, args.count, args.n_range)?,
                (None, Some(dir)) => load_dir(dir)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let threads = dagkit::threads_from_env(dagkit::available_threads());
            let outcome = dagkit::with_threads(threads, || train(&data, &cfg))?;
            fs::write(&args.history, history_csv(&outcome.history)).with_context(|| format!("{}", args.history.display()))?;
            checkpoint::save_stack(&outcome.params, &args.ckpt).with_context(|| format!("{}", args.ckpt.display()))?;
            let last = outcome.history.last().expect("at least one epoch");
            let fmt_opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:e}"));
            println!("graphs={} train={} val={}", data.len(), outcome.train_indices.len(), outcome.val_indices.len());
            println!("final_train_mse={:e}", last.train_loss);
            println!("final_val_mse={}", fmt_opt(last.val_loss));
            println!("mean_predictor_val_mse={}", fmt_opt(outcome.baseline_val_mse));
            println!("history={} ckpt={}", args.history.display(), args.ckpt.display());
        }
        Command::PprCheck { file, root, alpha } => {
            let g = load(&file)?;
            let report = support_check(&g, root, alpha)?;
            let zeros: Vec<String> = report.zero_set.iter().map(|v| v.to_string()).collect();
            println!("ok={}", report.ok);
            println!("zero_set={{{}}}", zeros.join(","));
            println!("min_support={:e}", report.min_support);
            if let Some(w) = report.witness {
                println!("witness={w}");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench(cmd) => return bench(cmd),
        Command::Gradcheck { blocks, d_model, heads, seed, n, samples, h, backend, task } => {
            let setup = GradCheckSetup {
                blocks,
                d_model,
                heads,
                n,
                backend: backend.into(),
                task: task_of(task, ReadoutArg::Mean),
                samples,
                h,
                seed,
                ..GradCheckSetup::default()
            };
            let report = random_stack_grad_check(&setup)?;
            println!("max_rel_error={:e}", report.max_rel_error);
            println!("worst_index={}", report.worst_index);
            println!("checked={} skipped={}", report.checked, report.skipped);
            if report.max_rel_error.is_nan() || report.max_rel_error >= 1e-5 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Gen { spec, out } => {
            let g = gen(&spec)?;
            save_edge_list(&g, &out).with_context(|| format!("{}", out.display()))?;
            println!("wrote {} n={} edges={}", out.display(), g.n(), g.edge_count());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn timing_config(t: &TimingArgs) -> TimingConfig {
    TimingConfig {
        d_model: t.d_model,
        heads: t.heads,
        repeats: t.repeats,
        seed: t.seed,
        threads: dagkit::threads_from_env(1),
    }
}

fn bench(cmd: BenchCommand) -> Result<ExitCode> {
    match cmd {
        BenchCommand::Bound { trees, n_max, outdeg, k, seed } => {
            if n_max == 0 {
                bail!("--n-max must be positive");
            }
            let mut rng = SplitMix64::new(seed);
            let mut failures = 0;
            let mut tight = 0;
            for i in 0..trees {
                let n = rng.range_inclusive(1, n_max);
                let r = bound_check_tree(&GeneratorSpec::tree(n, outdeg, seed.wrapping_add(i as u64)), k)?;
                if !r.ok {
                    failures += 1;
                    println!("violation n={} depth={} outdeg={} sum={} bound={}", r.n, r.depth, r.max_outdegree, r.sum_fields, r.bound);
                }
                tight += (r.sum_fields == r.bound) as usize;
            }
            let chain = bound_check(&gen(&GeneratorSpec::chain(n_max))?, k);
            println!("trees={trees} violations={failures} tight={tight}");
            println!("chain n={} sum={} bound={} ok={}", chain.n, chain.sum_fields, chain.bound, chain.ok);
            if failures > 0 || !chain.ok {
                return Ok(ExitCode::from(1));
            }
        }
        BenchCommand::Scale { timing, backend } => {
            let report = scaling_curve(timing.family.family, &timing.sizes, timing.k, backend.into(), &timing_config(&timing))?;
            print!("{}", match timing.format {
                Format::Table => report.to_table(),
                Format::Kv => report.to_key_values(),
                Format::Csv => report.to_csv(),
            });
        }
        BenchCommand::Crossover { timing } => {
            let report = backend_crossover(timing.family.family, &timing.sizes, timing.k, &timing_config(&timing))?;
            print!("{}", match timing.format {
                Format::Table => report.to_table(),
                Format::Kv => report.to_key_values(),
                Format::Csv => report.to_csv(),
            });
            if !report.equivalent() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
