use std::path::PathBuf;

use clap::{Parser, Subcommand};
use monc_core::simulation::{worker_main, RunEnv};

/// Mini-app simulation service.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
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

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Some(Cmd::Worker { spec, rank, out }) = args.command {
        std::process::exit(worker_main(&spec, rank, &out));
    }
    let listener = match tokio::net::TcpListener::bind(&args.listen).await {
        Ok(l) => l,
        Err(e) => {
            log::error!("cannot listen on {}: {e}", args.listen);
            std::process::exit(4);
        }
    };
    log::info!("listening on http://{}", listener.local_addr().expect("bound address"));
    if let Err(e) = monc_service::serve(listener, RunEnv::default()).await {
        log::error!("server failed: {e}");
        std::process::exit(4);
    }
}
