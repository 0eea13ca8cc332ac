//! Runs a whole simulation: resolves options, starts the I/O servers, spawns
//! model ranks on the chosen transport and collects their summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::api::{ApiError, DiagnosticsSummary, RankSummary, RunRequest, RunSummary, TransportKind};
use crate::checkpoint::{checkpoint_write, CheckpointImage};
use crate::components::{build_registry, KrylovTotals, KRYLOV_TOTALS};
use crate::decomp::{decompose, Comm, Coordinator, GlobalGrid, SocketTransport};
use crate::engine::run_model;
use crate::error::{CommError, Error, ErrorCategory, Result};
use crate::io::{parse_io_config, IoBridge, IoCluster, IoServerConfig, IoServerOptions};
use crate::options::{OptionValue, OptionsDatabase};
use crate::state::ModelState;

/// Option naming the checkpoint file. It is consumed at start-up and never
/// stored, so checkpoints of otherwise identical runs compare bitwise.
pub const CHECKPOINT_KEY: &str = "checkpoint_path";

/// Environment variable naming the executable that hosts the `worker`
/// subcommand for the process transport.
pub const WORKER_EXE_ENV: &str = "MONC_WORKER_EXE";

/// Process-wide settings that requests may not choose.
#[derive(Debug, Clone, Default)]
pub struct RunEnv {
    /// Executable providing the `worker` subcommand. Falls back to
    /// `MONC_WORKER_EXE`, then the current executable.
    pub worker_exe: Option<PathBuf>,
}

impl RunEnv {
    fn worker_exe(&self) -> Result<PathBuf> {
        if let Some(p) = &self.worker_exe {
            return Ok(p.clone());
        }
        if let Some(p) = std::env::var_os(WORKER_EXE_ENV) {
            return Ok(p.into());
        }
        std::env::current_exe().map_err(|e| Error::io("current executable", e))
    }
}

/// Global grid from `z_size`, `y_size`, `x_size` and optional `dz`, `dy`,
/// `dx` (default 1).
pub fn grid_from_options(opts: &OptionsDatabase) -> Result<GlobalGrid> {
    GlobalGrid::new(
        opts.count("z_size")?,
        opts.count("y_size")?,
        opts.count("x_size")?,
        opts.real_or("dz", 1.0)?,
        opts.real_or("dy", 1.0)?,
        opts.real_or("dx", 1.0)?,
    )
}

/// Everything a rank needs, with options fully resolved.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub options: OptionsDatabase,
    pub grid: GlobalGrid,
    pub workers: usize,
    pub restart: Option<Arc<CheckpointImage>>,
    pub restart_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub io: Option<(IoServerConfig, String)>,
    pub io_options: IoServerOptions,
    pub transport: TransportKind,
}

/// Resolves a request into a plan. Options are layered: checkpoint options
/// (on restart), then the configuration text, then request fields.
pub fn plan(req: &RunRequest) -> Result<RunPlan> {
    let restart = match &req.restart {
        Some(p) => Some(Arc::new(CheckpointImage::read(p)?)),
        None => None,
    };
    let mut opts = match &restart {
        Some(img) => img.options.clone(),
        None => OptionsDatabase::new(),
    };
    match (&req.config, &restart) {
        (Some(text), _) => {
            for (k, v) in OptionsDatabase::load_config(text)?.iter() {
                opts.set(k, v.clone());
            }
        }
        (None, None) => return Err(Error::config("no model configuration given")),
        (None, Some(_)) => {}
    }
    if let Some(s) = req.solver {
        for other in [crate::api::SolverKind::Fft, crate::api::SolverKind::Krylov] {
            opts.set(format!("{}_enabled", other.component()), OptionValue::Bool(other == s));
        }
    }
    if let Some(p) = req.precision {
        opts.set("solver_precision", OptionValue::Str(p.to_string()));
    }
    if let Some(r) = req.ios_ratio {
        opts.set("ios_ratio", OptionValue::Int(r as i64));
    }
    if let Some(n) = req.steps {
        opts.set("nn_timesteps", OptionValue::Int(n as i64));
    }
    for (k, v) in &req.overrides {
        opts.set(k.clone(), OptionValue::parse(v));
    }
    let stored_checkpoint = opts.remove(CHECKPOINT_KEY);
    let checkpoint = match (&req.checkpoint, stored_checkpoint) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(OptionValue::Str(s))) => Some(PathBuf::from(s)),
        (None, Some(v)) => {
            return Err(Error::config(format!("`{CHECKPOINT_KEY}` must be a path, got `{v}`")))
        }
        (None, None) => None,
    };

    let grid = grid_from_options(&opts)?;
    if let Some(img) = &restart {
        if img.shape != (grid.nz, grid.ny, grid.nx) {
            return Err(Error::Decomposition(format!(
                "checkpoint grid {}x{}x{} does not match configured grid {}x{}x{}",
                img.shape.0, img.shape.1, img.shape.2, grid.nz, grid.ny, grid.nx
            )));
        }
    }
    let workers = req.workers.max(1);
    decompose(grid, workers)?;
    build_registry(&opts)?;
    let mut io_options = IoServerOptions::from_options(&opts)?;
    if let Some(d) = &req.diagnostics {
        io_options.output = Some(d.clone());
    }
    let io = match &req.io_config {
        Some(xml) => Some((parse_io_config(xml)?, xml.clone())),
        None => None,
    };
    Ok(RunPlan {
        options: opts,
        grid,
        workers,
        restart,
        restart_path: req.restart.clone(),
        checkpoint,
        io,
        io_options,
        transport: req.transport,
    })
}

/// Runs one model rank to completion and writes the checkpoint if asked.
pub fn run_rank(plan: &RunPlan, comm: Comm, io: Option<IoBridge>) -> Result<RankSummary> {
    let layout = decompose(plan.grid, plan.workers)?.swap_remove(comm.rank());
    let mut state = ModelState::new(layout, Arc::new(plan.options.clone()), comm)?;
    if let Some(img) = &plan.restart {
        let r = img.restore(&state.layout)?;
        state.fields = r.fields;
        state.timestep = r.timestep;
        state.time = r.time;
        state.restarted = true;
    }
    state.io = io;
    let registry = build_registry(&plan.options)?;
    let result = run_model(&mut state, &registry);
    let submit_seconds = state.io.as_ref().map_or(0.0, |b| b.submit_seconds());
    if let Some(mut b) = state.io.take() {
        if let Err(e) = b.close() {
            warn!("rank {}: closing I/O bridge: {e}", state.comm.rank());
        }
    }
    result?;
    if let Some(path) = &plan.checkpoint {
        checkpoint_write(&mut state, path)?;
    }
    let totals = state.scratch_mut::<KrylovTotals>(KRYLOV_TOTALS).cloned().unwrap_or_default();
    Ok(RankSummary {
        rank: state.comm.rank(),
        timestep: state.timestep,
        time: state.time,
        loop_seconds: state.loop_seconds,
        comm: state.comm.stats(),
        solves: totals.solves,
        solver_iterations: totals.iterations,
        submit_seconds,
    })
}

/// Picks the error to report when several ranks fail: a rank's own failure
/// wins over the communication errors it causes in its peers.
fn root_cause(errors: Vec<Error>) -> Error {
    let mut errors = errors;
    let pos = errors
        .iter()
        .position(|e| e.category() != ErrorCategory::Communication)
        .unwrap_or(0);
    errors.swap_remove(pos)
}

fn collect(results: Vec<Result<RankSummary>>) -> Result<Vec<RankSummary>> {
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => ok.push(s),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        ok.sort_by_key(|s| s.rank);
        Ok(ok)
    } else {
        Err(root_cause(errors))
    }
}

/// Runs a simulation described by `req`.
pub fn run(req: &RunRequest, env: &RunEnv) -> Result<RunSummary> {
    let plan = plan(req)?;
    execute(&plan, env)
}

/// Runs a resolved plan.
pub fn execute(plan: &RunPlan, env: &RunEnv) -> Result<RunSummary> {
    let w = plan.workers;
    let mut cluster = match &plan.io {
        Some((cfg, _)) => Some(IoCluster::start(cfg.clone(), plan.io_options.clone(), w, plan.grid.nz)?),
        None => None,
    };
    info!(
        "run: {w} model ranks over {:?}, grid {}x{}x{}, {} I/O servers",
        plan.transport,
        plan.grid.nz,
        plan.grid.ny,
        plan.grid.nx,
        cluster.as_ref().map_or(0, |c| c.servers())
    );
    let ranks = match plan.transport {
        TransportKind::Threads | TransportKind::Sockets => run_threads(plan, cluster.as_ref()),
        TransportKind::Process => run_processes(plan, cluster.as_mut(), env),
    };
    let diagnostics = match cluster {
        Some(c) => {
            let servers = c.servers();
            let report = c.finish()?;
            for t in &report.dropped {
                warn!("diagnostics for timestep {t} dropped as incomplete");
            }
            Some(DiagnosticsSummary {
                path: report.output,
                servers,
                rows: report.rows_written,
                dropped: report.dropped,
                compute_seconds: report.compute_seconds,
                submit_seconds: report.submit_seconds.iter().sum(),
                errors: report.errors,
            })
        }
        None => None,
    };
    let ranks = ranks?;
    if let Some(d) = &diagnostics {
        if let Some(e) = d.errors.first() {
            return Err(Error::Diagnostics(e.clone()));
        }
    }
    let (timestep, time) = ranks.first().map_or((0, 0.0), |r| (r.timestep, r.time));
    Ok(RunSummary {
        workers: w,
        grid: [plan.grid.nz, plan.grid.ny, plan.grid.nx],
        timestep,
        time,
        loop_seconds: ranks.iter().map(|r| r.loop_seconds).fold(0.0, f64::max),
        ranks,
        diagnostics,
        checkpoint: plan.checkpoint.clone(),
    })
}

fn run_threads(plan: &RunPlan, cluster: Option<&IoCluster>) -> Result<Vec<RankSummary>> {
    let w = plan.workers;
    let layouts = decompose(plan.grid, w)?;
    let mut bridges = Vec::with_capacity(w);
    for l in &layouts {
        bridges.push(match cluster {
            Some(c) => Some(c.bridge(l)?),
            None => None,
        });
    }
    let results = match plan.transport {
        TransportKind::Sockets => {
            let coord = Coordinator::bind("127.0.0.1:0").map_err(CommError::Socket)?;
            let addr = coord.address().map_err(CommError::Socket)?;
            std::thread::scope(|s| {
                let server = s.spawn(move || coord.serve(w));
                let handles: Vec<_> = bridges
                    .into_iter()
                    .enumerate()
                    .map(|(r, io)| {
                        let addr = addr.clone();
                        s.spawn(move || {
                            let t = SocketTransport::connect(&addr, r, w)?;
                            run_rank(plan, Comm::new(t), io)
                        })
                    })
                    .collect();
                let results: Vec<Result<RankSummary>> =
                    handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect();
                if let Err(e) = server.join().expect("coordinator panicked") {
                    warn!("coordinator: {e}");
                }
                results
            })
        }
        _ => std::thread::scope(|s| {
            let handles: Vec<_> = Comm::local_group(w)
                .into_iter()
                .zip(bridges)
                .map(|(comm, io)| s.spawn(move || run_rank(plan, comm, io)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
        }),
    };
    collect(results)
}

/// What the parent hands each worker process.
#[derive(Debug, Serialize, Deserialize)]
struct WorkerSpec {
    options: Vec<u8>,
    workers: usize,
    restart: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    /// I/O cluster address and XML configuration.
    io: Option<(String, String)>,
}

type WorkerResult = std::result::Result<RankSummary, ApiError>;

fn run_processes(plan: &RunPlan, cluster: Option<&mut IoCluster>, env: &RunEnv) -> Result<Vec<RankSummary>> {
    let w = plan.workers;
    let exe = env.worker_exe()?;
    let io = match (cluster, &plan.io) {
        (Some(c), Some((_, xml))) => Some((c.listen()?, xml.clone())),
        _ => None,
    };
    let spec = WorkerSpec {
        options: plan.options.serialize(),
        workers: w,
        restart: plan.restart_path.clone(),
        checkpoint: plan.checkpoint.clone(),
        io,
    };
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let spec_path = dir.path().join("spec.json");
    let bytes = serde_json::to_vec(&spec).expect("worker spec serialises");
    fs::write(&spec_path, bytes).map_err(|e| Error::io(&spec_path, e))?;

    let coord = Coordinator::bind("127.0.0.1:0").map_err(CommError::Socket)?;
    let addr = coord.address().map_err(CommError::Socket)?;
    // Not joined: if a worker never starts, the coordinator blocks forever.
    let server = std::thread::spawn(move || coord.serve(w));

    let mut children = Vec::with_capacity(w);
    let mut spawn_error = None;
    for r in 0..w {
        let out = dir.path().join(format!("rank{r}.json"));
        let child = Command::new(&exe)
            .arg("worker")
            .arg("--spec")
            .arg(&spec_path)
            .arg("--rank")
            .arg(r.to_string())
            .arg("--out")
            .arg(&out)
            .env(crate::decomp::socket::COORD_ENV, &addr)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn();
        match child {
            Ok(c) => children.push((r, out, c)),
            Err(e) => {
                spawn_error = Some(Error::io(&exe, e));
                break;
            }
        }
    }
    if let Some(e) = spawn_error {
        for (_, _, mut c) in children {
            let _ = c.kill();
            let _ = c.wait();
        }
        return Err(e);
    }
    let mut results = Vec::with_capacity(w);
    for (r, out, mut child) in children {
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        let result = match fs::read(&out) {
            Ok(bytes) => match serde_json::from_slice::<WorkerResult>(&bytes) {
                Ok(res) => res.map_err(Error::from),
                Err(e) => Err(Error::Remote {
                    category: ErrorCategory::Communication,
                    message: format!("rank {r} wrote an unreadable result: {e}"),
                }),
            },
            Err(_) => Err(Error::Remote {
                category: ErrorCategory::Communication,
                message: format!("worker process for rank {r} exited with {status} and no result"),
            }),
        };
        results.push(result);
    }
    if results.iter().all(|r| r.is_ok()) {
        if let Ok(Err(e)) = server.join() {
            warn!("coordinator: {e}");
        }
    }
    collect(results)
}

/// Entry point of the `worker` subcommand. Writes the rank's outcome to
/// `out` and returns the process exit code.
pub fn worker_main(spec: &Path, rank: usize, out: &Path) -> i32 {
    let result = (|| -> Result<RankSummary> {
        let bytes = fs::read(spec).map_err(|e| Error::io(spec, e))?;
        let spec: WorkerSpec = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("bad worker spec {}: {e}", spec.display())))?;
        let options = OptionsDatabase::deserialize(&spec.options)?;
        let restart = match &spec.restart {
            Some(p) => Some(Arc::new(CheckpointImage::read(p)?)),
            None => None,
        };
        let plan = RunPlan {
            grid: grid_from_options(&options)?,
            options,
            workers: spec.workers,
            restart,
            restart_path: spec.restart.clone(),
            checkpoint: spec.checkpoint.clone(),
            io: None,
            io_options: IoServerOptions::default(),
            transport: TransportKind::Process,
        };
        let transport = SocketTransport::from_env(rank, spec.workers)?;
        let comm = Comm::new(transport);
        let io = match &spec.io {
            Some((addr, xml)) => {
                let layout = decompose(plan.grid, plan.workers)?.swap_remove(rank);
                Some(IoBridge::connect(addr, &layout, parse_io_config(xml)?)?)
            }
            None => None,
        };
        run_rank(&plan, comm, io)
    })();
    let code = match &result {
        Ok(_) => 0,
        Err(e) => {
            log::error!("rank {rank}: {e}");
            e.category().exit_code()
        }
    };
    let body: WorkerResult = result.map_err(|e| ApiError::from(&e));
    let bytes = serde_json::to_vec(&body).expect("worker result serialises");
    if let Err(e) = fs::write(out, bytes) {
        log::error!("rank {rank}: cannot write {}: {e}", out.display());
        return ErrorCategory::Io.exit_code();
    }
    code
}

/// A small dry-boundary-layer configuration with every model component on
/// and the FFT solver selected.
pub fn default_config(nz: usize, ny: usize, nx: usize) -> String {
    format!(
        "# dry neutral boundary layer\n\
         z_size={nz}\ny_size={ny}\nx_size={nx}\n\
         dtm=0.1\nnn_timesteps=10\n\
         ug=2.0\nvg=1.0\ntheta_perturbation_amplitude=0.1\nseed=42\nviscosity=0.01\nforcing_rate=0.001\n\
         dry_boundary_layer_enabled=.true.\ndynamics_enabled=.true.\npressure_source_enabled=.true.\n\
         fftsolver_enabled=.true.\niterativesolver_enabled=.false.\nprojection_enabled=.true.\n\
         io_bridge_enabled=.true.\ntermination_check_enabled=.true.\n\
         solver_tolerance=1e-4\n"
    )
}
