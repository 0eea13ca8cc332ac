//! `monc-mini`: runs simulations and scaling sweeps.
//!
//! Every operation goes through the HTTP service. Without `--server` an
//! in-process service is started on a loopback port for the duration of
//! the command. Exit codes: 0 success, 1 configuration, 2 numerical,
//! 3 communication, 4 I/O.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use monc_client::Client;
use monc_core::api::{BenchMode, BenchRequest, RunRequest, SolverKind, TransportKind};
use monc_core::bench::{bench_csv, write_bench_csv};
use monc_core::simulation::{worker_main, RunEnv};
use monc_core::{Error, Precision, Result};

#[derive(Parser)]
#[command(name = "monc-mini", version, about, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
    /// Runs one model rank for the process transport.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Model configuration file (`key=value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// I/O server XML configuration.
    #[arg(long)]
    io_config: Option<PathBuf>,
    /// Model ranks; a comma-separated list with `--bench`.
    #[arg(long, value_delimiter = ',')]
    workers: Vec<usize>,
    /// Model ranks per I/O server.
    #[arg(long)]
    ios_ratio: Option<usize>,
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Checkpoint to resume from.
    #[arg(long)]
    restart: Option<PathBuf>,
    /// Checkpoint to write at the end of the run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Runs a scaling sweep instead of a single simulation.
    #[arg(long)]
    bench: Option<BenchMode>,
    /// Repetitions per sweep configuration.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Sweep CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep base grid `z,y,x`: per rank (weak) or global (strong).
    #[arg(long, value_delimiter = ',')]
    base: Option<Vec<usize>>,
    /// Service URL; an in-process service is used when absent.
    #[arg(long)]
    server: Option<String>,
    /// threads, sockets or process. Default: threads for runs, process for sweeps.
    #[arg(long)]
    transport: Option<TransportKind>,
    /// Overrides `nn_timesteps` (runs) or sets steps per sweep run.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides the diagnostics CSV path.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Extra option, `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Prints the run summary as JSON.
    #[arg(long)]
    json: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn abs_opt(path: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    path.as_deref().map(absolute).transpose()
}

fn run_request(a: &RunArgs) -> Result<RunRequest> {
    let workers = match a.workers.as_slice() {
        [] => 1,
        [w] => *w,
        _ => return Err(Error::config("--workers takes a single count unless --bench is given")),
    };
    let mut overrides = std::collections::BTreeMap::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(RunRequest {
        config: a.config.as_deref().map(read_text).transpose()?,
        io_config: a.io_config.as_deref().map(read_text).transpose()?,
        workers,
        ios_ratio: a.ios_ratio,
        solver: a.solver,
        precision: a.precision,
        restart: abs_opt(&a.restart)?,
        checkpoint: abs_opt(&a.checkpoint)?,
        steps: a.steps,
        transport: a.transport.unwrap_or_default(),
        diagnostics: abs_opt(&a.diagnostics)?,
        overrides,
    })
}

fn bench_request(mode: BenchMode, a: &RunArgs) -> Result<BenchRequest> {
    let d = BenchRequest::default();
    let base = match a.base.as_deref() {
        Some(&[z, y, x]) => [z, y, x],
        Some(_) => return Err(Error::config("--base takes exactly three sizes: z,y,x")),
        None => d.base,
    };
    Ok(BenchRequest {
        mode,
        workers: if a.workers.is_empty() { d.workers } else { a.workers.clone() },
        base,
        solvers: a.solver.map_or(d.solvers, |s| vec![s]),
        precisions: a.precision.map_or(d.precisions, |p| vec![p]),
        reps: a.reps,
        steps: a.steps.unwrap_or(d.steps),
        transport: a.transport.unwrap_or(d.transport),
        config: a.config.as_deref().map(read_text).transpose()?,
    })
}

async fn client_for(a: &RunArgs) -> Result<Client> {
    if let Some(url) = &a.server {
        return Ok(Client::new(url.clone()));
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .map_err(|e| Error::io("127.0.0.1:0", e))?;
    let addr = listener.local_addr().map_err(|e| Error::io("127.0.0.1:0", e))?;
    tokio::spawn(async move {
        if let Err(e) = monc_service::serve(listener, RunEnv::default()).await {
            log::error!("embedded service stopped: {e}");
        }
    });
    Ok(Client::new(format!("http://{addr}")))
}

async fn execute(a: RunArgs) -> Result<()> {
    let client = client_for(&a).await?;
    if let Some(mode) = a.bench {
        let req = bench_request(mode, &a)?;
        let report = client.bench(&req).await?;
        for s in &report.skipped {
            eprintln!("skipped: {s}");
        }
        match &a.out {
            Some(path) => write_bench_csv(&report.rows, path)?,
            None => print!("{}", bench_csv(&report.rows)),
        }
        return Ok(());
    }
    if a.config.is_none() && a.restart.is_none() {
        return Err(Error::config("either --config or --restart is required"));
    }
    let summary = client.run(&run_request(&a)?).await?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
        return Ok(());
    }
    let [z, y, x] = summary.grid;
    println!(
        "completed timestep {} (t = {:.3} s) on {} ranks, grid {z}x{y}x{x}, loop {:.3} s",
        summary.timestep, summary.time, summary.workers, summary.loop_seconds
    );
    if let Some(d) = &summary.diagnostics {
        println!("diagnostics: {} rows from {} I/O servers -> {}", d.rows, d.servers, d.path.display());
        if !d.dropped.is_empty() {
            println!("dropped incomplete timesteps: {:?}", d.dropped);
        }
    }
    if let Some(c) = &summary.checkpoint {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(Cmd::Worker { spec, rank, out }) = &cli.command {
        std::process::exit(worker_main(spec, *rank, out));
    }
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let result = match cli.command {
        Some(Cmd::Serve { listen }) => rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind(&listen)
                .await
                .map_err(|e| Error::io(&listen, e))?;
            eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Error::io(&listen, e))?);
            monc_service::serve(listener, RunEnv::default())
                .await
                .map_err(|e| Error::io(&listen, e))
        }),
        Some(Cmd::Worker { .. }) => unreachable!("handled above"),
        None => rt.block_on(execute(cli.run)),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.category().exit_code());
    }
}
