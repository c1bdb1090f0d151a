use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stnas_core::arch::{DiscreteArchitecture, SearchMode};
use stnas_core::bench::benchmark_search;
use stnas_core::config::RunConfig;
use stnas_core::data::{gen_synthetic, write_signals_csv};
use stnas_core::model::Network;
use stnas_core::params::sub_seed;
use stnas_core::search::{run_search, search_log_csv, SupernetState};
use stnas_core::train::{evaluate, persistence_baseline, train_derived};
use stnas_core::StnasError;
use thiserror::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] StnasError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("STNAS_THREADS: {0}")]
    Threads(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "stnas",
    version,
    about = "Decoupled architecture search for spatio-temporal forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic diffusion dataset and a starter config.
    GenSynth {
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an architecture; writes arch.txt, search_log.csv and state.json.
    Search(RunArgs),
    /// Re-derive arch.txt from a saved search state.
    Derive {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        state: PathBuf,
    },
    /// Retrain an architecture; writes metrics.csv, train_log.csv and model.json.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Test-split metrics of a trained model.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Time decoupled against mixed search; writes bench.csv.
    Bench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<SearchMode>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        mkdir(&self.out)?;
        Ok(cfg)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn init_threads() -> Result<()> {
    let n = match std::env::var("STNAS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Threads(format!("`{v}` is not a positive integer")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Threads(e.to_string()))
}

fn gen_synth(nodes: usize, steps: usize, seed: u64, out: &Path) -> Result<()> {
    mkdir(out)?;
    let (graph, signals) = gen_synthetic(nodes, steps, seed)?;
    write(&out.join("signals.csv"), write_signals_csv(&signals, 0))?;
    write(&out.join("graph.csv"), graph.to_edge_csv())?;
    let mut cfg = RunConfig::new(vec![PathBuf::from("signals.csv")]);
    cfg.adjacency = Some(PathBuf::from("graph.csv"));
    cfg.seed = seed;
    write(&out.join("config.txt"), cfg.to_text())?;
    println!("wrote {} steps × {} nodes to {}", steps, nodes, out.display());
    Ok(())
}

fn search(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let (splits, adjacency) = cfg.load_data()?;
    let model = cfg.model_config(&splits)?;
    let out = run_search(model, &splits, adjacency, &cfg.search_config())?;
    out.arch.save(&args.out.join("arch.txt"))?;
    write(&args.out.join("search_log.csv"), search_log_csv(&out.log))?;
    write(&args.out.join("state.json"), out.state.to_json()?)?;
    for e in &out.log {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.val_loss, e.seconds
        );
    }
    println!("architecture written to {}", args.out.join("arch.txt").display());
    Ok(())
}

fn derive(args: &RunArgs, state_path: &Path) -> Result<()> {
    let cfg = args.load()?;
    let (splits, adjacency) = cfg.load_data()?;
    let model = cfg.model_config(&splits)?;
    let mut state = SupernetState::new(model, &splits, adjacency, &cfg.search_config())?;
    state.load_json(&read(state_path)?)?;
    let arch = state.derive();
    arch.save(&args.out.join("arch.txt"))?;
    print!("{}", arch.to_text());
    Ok(())
}

fn train(args: &RunArgs, arch_path: &Path) -> Result<()> {
    let cfg = args.load()?;
    let (splits, adjacency) = cfg.load_data()?;
    let arch = DiscreteArchitecture::load(arch_path)?;
    let out = train_derived(&arch, &splits, adjacency, &cfg.train_config())?;
    write(&args.out.join("metrics.csv"), out.test.to_csv())?;
    write(&args.out.join("model.json"), out.net.store.to_json()?)?;
    let mut log = String::from("epoch,train_loss,val_mae\n");
    for e in &out.history {
        log.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_mae));
    }
    write(&args.out.join("train_log.csv"), log)?;
    println!("best epoch {} (val MAE {:.4})", out.best_epoch, out.best_val_mae);
    print!("{}", out.test.to_table());
    Ok(())
}

fn eval(args: &RunArgs, arch_path: &Path, model_path: &Path) -> Result<()> {
    let cfg = args.load()?;
    let (splits, adjacency) = cfg.load_data()?;
    let arch = DiscreteArchitecture::load(arch_path)?;
    let ds = &splits.train;
    let mut net = Network::derived(
        &arch,
        ds.nodes,
        ds.channels,
        ds.time.steps_per_day(),
        adjacency,
        splits.stats().clone(),
        sub_seed(cfg.seed, "train.init"),
    )?;
    net.store.load_json(&read(model_path)?)?;
    let report = evaluate(&net, &splits.test, cfg.batch_size)?;
    let baseline = persistence_baseline(&splits.test)?;
    write(&args.out.join("eval_metrics.csv"), report.to_csv())?;
    print!("{}", report.to_table());
    println!("persistence baseline MAE {:.4}", baseline.overall.mae);
    Ok(())
}

fn bench(args: &RunArgs) -> Result<()> {
    let cfg = args.load()?;
    let (splits, adjacency) = cfg.load_data()?;
    let model = cfg.model_config(&splits)?;
    let report = benchmark_search(
        &model,
        &splits,
        adjacency.as_ref(),
        &cfg.search_config(),
        &[SearchMode::Decoupled, SearchMode::Mixed],
    )?;
    write(&args.out.join("bench.csv"), report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenSynth {
            nodes,
            steps,
            seed,
            out,
        } => gen_synth(nodes, steps, seed, &out),
        Command::Search(args) => search(&args),
        Command::Derive { run, state } => derive(&run, &state),
        Command::Train { run, arch } => train(&run, &arch),
        Command::Eval { run, arch, model } => eval(&run, &arch, &model),
        Command::Bench(args) => bench(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
