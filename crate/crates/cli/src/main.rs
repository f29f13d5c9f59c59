//! `decorr`: generate synthetic data, run experiment grids, evaluate
//! checkpoints, and serve the annotation API.

mod overrides;

use std::fs;
use std::io::{IsTerminal, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use decorr_core::active_loop::{LoopState, LOOP_STATE_KIND};
use decorr_core::data::{self, SamplingOptions};
use decorr_core::eval::{self, GridReport};
use decorr_core::{checkpoint, TripletPool};

use overrides::{load_grid, GridOverrides};

#[derive(Parser)]
#[command(
    name = "decorr",
    version,
    about = "Active triplet metric learning with decorrelated batch selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: features.csv and labeled triplets.csv.
    Generate(GenerateArgs),
    /// Run an experiment grid and write learning curves.
    Run(Box<RunArgs>),
    /// Report the TGA of a checkpointed model.
    Evaluate(EvaluateArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// Number of distinct labeled triplets.
    #[arg(long, default_value_t = 40_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Grid file (TOML). Optional when the flags describe a whole grid.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: GridOverrides,
    /// Learning-curve CSV, one row per (cell, seed, round).
    #[arg(long)]
    out: PathBuf,
    /// Per-cell mean and standard deviation by round.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Every selection decision, as JSON.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// Directory for the final loop state of every run.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Loop-state or annotation-session checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled triplets to evaluate on (with --features).
    #[arg(long, conflicts_with = "config")]
    triplets: Option<PathBuf>,
    #[arg(long, requires = "triplets")]
    features: Option<PathBuf>,
    /// Evaluate on the held-out pool of a grid run instead.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed of the grid (overrides the file).
    #[arg(long, requires = "config")]
    seed: Option<u64>,
    /// Which run of the grid: run i uses seed + i.
    #[arg(long, default_value_t = 0, requires = "config")]
    run: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Where sessions, label logs and checkpoints live.
    #[arg(long, default_value = "decorr-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(*a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let (objects, metric) = data::generate_synthetic(args.n, args.d, args.seed)?;
    let pool = data::sample_triplets(
        &objects,
        &metric,
        args.count,
        eval::derive_seed(args.seed, 1),
        SamplingOptions {
            reject_duplicates: true,
        },
    )?;
    fs::create_dir_all(&args.out)?;
    data::save_features(args.out.join("features.csv"), &objects)?;
    data::save_triplets(args.out.join("triplets.csv"), &pool, &objects)?;
    println!(
        "wrote {} objects (d={}) and {} labeled triplets to {}",
        objects.len(),
        objects.dim(),
        pool.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_summary(path: &Path, report: &GridReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "cell,strategy,round,runs,mean_tga,std_tga")?;
    for s in &report.summaries {
        writeln!(
            w,
            "{},{},{},{},{:.16e},{:.16e}",
            s.cell, s.strategy, s.round, s.runs, s.mean_tga, s.std_tga
        )?;
    }
    w.flush()?;
    Ok(())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let grid = load_grid(args.config.as_deref(), &args.overrides)?;
    if let Some(dir) = &args.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let report = eval::run_grid_with(&grid, |cell, seed, state| match &args.checkpoint_dir {
        Some(dir) => checkpoint::save(dir.join(format!("cell{cell}-seed{seed}.json")), LOOP_STATE_KIND, state),
        None => Ok(()),
    })?;

    eval::emit_curves(&report.records, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.summary {
        write_summary(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.audit {
        fs::write(path, serde_json::to_vec(&report.audit)?).with_context(|| format!("writing {}", path.display()))?;
    }

    for (c, cell) in grid.cells.iter().enumerate() {
        if let Some(last) = report.summaries.iter().rfind(|s| s.cell == c) {
            println!(
                "cell {c} {:<14} b={:<4} noise={:<4} round {:>2}: TGA {:.4} ± {:.4} over {} runs",
                cell.strategy.to_string(),
                cell.batch_size,
                cell.noise_rate,
                last.round,
                last.mean_tga,
                last.std_tga,
                last.runs
            );
        }
    }
    for f in &report.failures {
        eprintln!("run failed: cell {} seed {}: {}", f.cell, f.seed, f.message);
    }
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn load_state(path: &Path) -> Result<LoopState> {
    let kind = checkpoint::kind(path).with_context(|| format!("reading {}", path.display()))?;
    if kind == LOOP_STATE_KIND {
        Ok(checkpoint::load(path, LOOP_STATE_KIND)?)
    } else if kind == decorr_service::session::SESSION_KIND {
        Ok(decorr_service::session::load_loop_state(path)?)
    } else {
        bail!("{} is a {kind} checkpoint, not a model", path.display())
    }
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let state = load_state(&args.checkpoint)?;
    let (objects, test): (_, TripletPool) = match (&args.triplets, &args.config) {
        (Some(triplets), _) => {
            let features = args.features.as_ref().context("--triplets needs --features")?;
            let objects = data::load_features(features)?;
            let pool = data::load_triplets(triplets, &objects)?;
            (objects, pool)
        }
        (None, Some(config)) => {
            let overrides = GridOverrides {
                seed: args.seed,
                ..Default::default()
            };
            let grid = load_grid(Some(config), &overrides)?;
            let run = eval::prepare_run(&grid.dataset, grid.seed, grid.run_seed(args.run), 0.0)?;
            (run.objects, run.test)
        }
        (None, None) => bail!("give --features and --triplets, or --config"),
    };
    state.validate(objects.features())?;
    let tga = eval::compute_tga(state.model(), objects.features(), &test)?;
    println!(
        "TGA {tga:.6} over {} triplets (round {}, {} labeled)",
        test.len(),
        state.round(),
        state.labeled().len()
    );
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let service = decorr_service::Service::open(&args.data_dir)?;
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        tracing::info!(addr = %listener.local_addr()?, data_dir = %args.data_dir.display(), "serving");
        decorr_service::serve(listener, service, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(ExitCode::SUCCESS)
    })
}
