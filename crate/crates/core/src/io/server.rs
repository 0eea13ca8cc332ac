//! Diagnostics servers.
//!
//! Each server owns a receipt thread fed by a bounded queue, a fixed worker
//! pool that turns every received slab into per-level partials, and shares
//! one result sink with the other servers. The sink combines partials across
//! servers and writes timesteps to the CSV in ascending order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::config::{DiagnosticAction, IoServerConfig};
use super::message::{DiagnosticMessage, SlabExtent};
use super::reduction::{combine_partials, horizontal_reduction, LevelPartial, ServerPartial};
use super::writer::DiagnosticsWriter;
use crate::decomp::socket::{read_frame, write_frame};
use crate::decomp::{Frame, PencilLayout};
use crate::error::{CommError, Error, Result};
use crate::options::OptionsDatabase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoServerOptions {
    /// Model ranks per I/O server.
    pub ios_ratio: usize,
    pub pool_size: usize,
    /// Bounded queue length per server; a full queue blocks submitters.
    pub queue_capacity: usize,
    /// A partially received timestep older than this is dropped.
    pub stale_timeout: Duration,
    /// Artificial delay added to every reduction action.
    pub action_delay: Duration,
    /// Overrides the output path from the XML configuration.
    pub output: Option<PathBuf>,
}

impl Default for IoServerOptions {
    fn default() -> Self {
        IoServerOptions {
            ios_ratio: 15,
            pool_size: 4,
            queue_capacity: 64,
            stale_timeout: Duration::from_secs(60),
            action_delay: Duration::ZERO,
            output: None,
        }
    }
}

impl IoServerOptions {
    /// Reads `ios_ratio`, `ios_pool_size`, `ios_queue_capacity`,
    /// `ios_stale_timeout` (seconds) and `ios_action_delay` (seconds).
    pub fn from_options(opts: &OptionsDatabase) -> Result<Self> {
        let d = IoServerOptions::default();
        let ratio = opts.count_or("ios_ratio", d.ios_ratio)?;
        let pool = opts.count_or("ios_pool_size", d.pool_size)?;
        let cap = opts.count_or("ios_queue_capacity", d.queue_capacity)?;
        if ratio == 0 || pool == 0 || cap == 0 {
            return Err(Error::config(
                "ios_ratio, ios_pool_size and ios_queue_capacity must be >= 1",
            ));
        }
        let secs = |key: &str, default: Duration| -> Result<Duration> {
            let v = opts.real_or(key, default.as_secs_f64())?;
            Duration::try_from_secs_f64(v).map_err(|_| Error::config(format!("`{key}` must be >= 0")))
        };
        Ok(IoServerOptions {
            ios_ratio: ratio,
            pool_size: pool,
            queue_capacity: cap,
            stale_timeout: secs("ios_stale_timeout", d.stale_timeout)?,
            action_delay: secs("ios_action_delay", d.action_delay)?,
            output: opts.string_opt("diagnostics_path")?.map(PathBuf::from),
        })
    }

    pub fn servers_for(&self, model_ranks: usize) -> usize {
        model_ranks.div_ceil(self.ios_ratio).max(1)
    }

    pub fn server_of(&self, rank: usize, model_ranks: usize) -> usize {
        (rank / self.ios_ratio).min(self.servers_for(model_ranks) - 1)
    }
}

/// Order in which one server saw a message arrive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub rank: usize,
    pub timestep: u64,
    pub field: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IoReport {
    /// `(timestep, output) -> per-level values` for every completed result.
    pub results: BTreeMap<(u64, String), Vec<f64>>,
    /// Total seconds spent inside pool units across all servers.
    pub compute_seconds: f64,
    /// Model-side seconds spent in `submit_field`, by model rank.
    pub submit_seconds: Vec<f64>,
    /// Per-server arrival log.
    pub arrivals: Vec<Vec<Arrival>>,
    /// Timesteps dropped as incomplete.
    pub dropped: Vec<u64>,
    pub rows_written: usize,
    pub output: PathBuf,
    pub errors: Vec<String>,
}

enum Envelope {
    Register {
        rank: usize,
        extent: SlabExtent,
        reply: Sender<std::result::Result<(), String>>,
    },
    Data(DiagnosticMessage),
    Done {
        rank: usize,
        submit_seconds: f64,
    },
}

enum SinkMsg {
    Open(u64),
    Partial { output: String, partial: ServerPartial },
    Dropped(u64),
}

struct UnitResult {
    timestep: u64,
    field: String,
    rank: usize,
    partials: Vec<(String, LevelPartial)>,
    seconds: f64,
    error: Option<String>,
}

struct ServerOutcome {
    compute_seconds: f64,
    arrivals: Vec<Arrival>,
    submit_seconds: Vec<(usize, f64)>,
    errors: Vec<String>,
}

struct SinkOutcome {
    results: BTreeMap<(u64, String), Vec<f64>>,
    dropped: Vec<u64>,
    rows: usize,
    errors: Vec<String>,
}

/// Running set of I/O servers for one model run.
pub struct IoCluster {
    config: Arc<IoServerConfig>,
    options: IoServerOptions,
    model_ranks: usize,
    inboxes: Vec<Sender<Envelope>>,
    servers: Vec<JoinHandle<ServerOutcome>>,
    sink: JoinHandle<SinkOutcome>,
    output: PathBuf,
    listener: Option<(String, Arc<AtomicBool>, JoinHandle<()>)>,
}

impl IoCluster {
    /// Starts `ceil(model_ranks / ios_ratio)` servers and the sink. The
    /// output file is created (header only) before this returns.
    pub fn start(
        config: IoServerConfig,
        options: IoServerOptions,
        model_ranks: usize,
        nz: usize,
    ) -> Result<Self> {
        let output = options.output.clone().unwrap_or_else(|| config.output.clone());
        let writer = DiagnosticsWriter::create(&output)?;
        let config = Arc::new(config);
        let nservers = options.servers_for(model_ranks);
        let (sink_tx, sink_rx) = unbounded();
        let mut inboxes = Vec::new();
        let mut servers = Vec::new();
        for s in 0..nservers {
            let served: BTreeSet<usize> = (0..model_ranks)
                .filter(|&r| options.server_of(r, model_ranks) == s)
                .collect();
            let (tx, rx) = bounded(options.queue_capacity);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(options.pool_size)
                .thread_name(move |i| format!("io{s}-pool{i}"))
                .build()
                .map_err(|e| Error::config(format!("cannot build I/O pool: {e}")))?;
            let server = Server {
                index: s,
                served,
                nz,
                config: config.clone(),
                options: options.clone(),
                pool,
                sink: sink_tx.clone(),
            };
            servers.push(
                std::thread::Builder::new()
                    .name(format!("io-server-{s}"))
                    .spawn(move || server.run(rx))
                    .expect("spawn I/O server"),
            );
            inboxes.push(tx);
        }
        drop(sink_tx);
        let sink_config = config.clone();
        let sink = std::thread::Builder::new()
            .name("io-sink".into())
            .spawn(move || run_sink(sink_rx, sink_config, nservers, writer))
            .expect("spawn I/O sink");
        Ok(IoCluster {
            config,
            options,
            model_ranks,
            inboxes,
            servers,
            sink,
            output,
            listener: None,
        })
    }

    pub fn config(&self) -> &Arc<IoServerConfig> {
        &self.config
    }

    pub fn servers(&self) -> usize {
        self.inboxes.len()
    }

    /// Handshake for an in-process model rank.
    pub fn bridge(&self, layout: &PencilLayout) -> Result<IoBridge> {
        if layout.rank >= self.model_ranks {
            return Err(CommError::Protocol(format!("rank {} is not a model rank", layout.rank)).into());
        }
        let inbox = self.inboxes[self.options.server_of(layout.rank, self.model_ranks)].clone();
        let extent = SlabExtent::of(layout);
        register(&inbox, layout.rank, extent)?;
        Ok(IoBridge {
            rank: layout.rank,
            config: self.config.clone(),
            link: Link::Local(inbox),
            submit_seconds: 0.0,
            closed: false,
        })
    }

    /// Accepts remote bridges over TCP and returns the address to hand to
    /// model processes.
    pub fn listen(&mut self) -> Result<String> {
        if let Some((addr, ..)) = &self.listener {
            return Ok(addr.clone());
        }
        let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| CommError::Socket(e))?;
        let addr = listener.local_addr().map_err(CommError::Socket)?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let inboxes = self.inboxes.clone();
        let (options, model_ranks) = (self.options.clone(), self.model_ranks);
        let stop2 = stop.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let inboxes = inboxes.clone();
                let options = options.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_remote(stream, &inboxes, &options, model_ranks) {
                        log::warn!("remote I/O bridge: {e}");
                    }
                });
            }
        });
        self.listener = Some((addr.clone(), stop, handle));
        Ok(addr)
    }

    /// Waits for every bridge to close and all in-flight work to drain, then
    /// returns the report. Timesteps still incomplete are dropped and logged.
    pub fn finish(mut self) -> Result<IoReport> {
        if let Some((addr, stop, handle)) = self.listener.take() {
            stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(&addr);
            let _ = handle.join();
        }
        self.inboxes.clear();
        let mut report = IoReport {
            submit_seconds: vec![0.0; self.model_ranks],
            output: self.output.clone(),
            ..IoReport::default()
        };
        for h in self.servers {
            let out = h
                .join()
                .map_err(|_| Error::Diagnostics("I/O server thread panicked".into()))?;
            report.compute_seconds += out.compute_seconds;
            report.arrivals.push(out.arrivals);
            for (rank, s) in out.submit_seconds {
                report.submit_seconds[rank] += s;
            }
            report.errors.extend(out.errors);
        }
        let sink = self
            .sink
            .join()
            .map_err(|_| Error::Diagnostics("I/O sink thread panicked".into()))?;
        report.results = sink.results;
        report.dropped = sink.dropped;
        report.rows_written = sink.rows;
        report.errors.extend(sink.errors);
        for e in &report.errors {
            log::warn!("diagnostics: {e}");
        }
        Ok(report)
    }
}

fn register(inbox: &Sender<Envelope>, rank: usize, extent: SlabExtent) -> Result<()> {
    let (reply, answer) = bounded(1);
    inbox
        .send(Envelope::Register { rank, extent, reply })
        .map_err(|_| CommError::Disconnected { rank, peer: usize::MAX })?;
    answer
        .recv()
        .map_err(|_| CommError::Disconnected { rank, peer: usize::MAX })?
        .map_err(|e| CommError::Protocol(e).into())
}

const TAG_REGISTER: u32 = 1;
const TAG_DATA: u32 = 2;
const TAG_DONE: u32 = 3;
const TAG_ACK: u32 = 4;

fn serve_remote(
    stream: TcpStream,
    inboxes: &[Sender<Envelope>],
    options: &IoServerOptions,
    model_ranks: usize,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let Ok(first) = read_frame(&mut reader) else {
        return Ok(());
    };
    let rank = first.source as usize;
    let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let extent = match (first.tag, SlabExtent::decode(&first.payload)) {
        (TAG_REGISTER, Some(e)) if rank < model_ranks => e,
        _ => return Err(bad(format!("bad handshake from rank {rank}"))),
    };
    let inbox = &inboxes[options.server_of(rank, model_ranks)];
    let status = register(inbox, rank, extent).map_err(|e| e.to_string());
    let payload = match &status {
        Ok(()) => Vec::new(),
        Err(e) => e.as_bytes().to_vec(),
    };
    write_frame(&mut writer, &Frame { tag: TAG_ACK, source: 0, payload })?;
    if status.is_err() {
        return Ok(());
    }
    let mut submit_seconds = 0.0;
    loop {
        match read_frame(&mut reader) {
            Ok(f) if f.tag == TAG_DATA => {
                let msg = DiagnosticMessage::decode(&f.payload)
                    .ok_or_else(|| bad(format!("malformed slab from rank {rank}")))?;
                if inbox.send(Envelope::Data(msg)).is_err() {
                    break;
                }
            }
            Ok(f) if f.tag == TAG_DONE && f.payload.len() == 8 => {
                submit_seconds = f64::from_le_bytes(f.payload[..].try_into().unwrap());
                break;
            }
            Ok(f) => return Err(bad(format!("unexpected frame tag {} from rank {rank}", f.tag))),
            Err(_) => break,
        }
    }
    let _ = inbox.send(Envelope::Done { rank, submit_seconds });
    Ok(())
}

struct Server {
    index: usize,
    served: BTreeSet<usize>,
    nz: usize,
    config: Arc<IoServerConfig>,
    options: IoServerOptions,
    pool: rayon::ThreadPool,
    sink: Sender<SinkMsg>,
}

/// Per-(timestep, field) bookkeeping on one server.
struct Pending {
    first_seen: Instant,
    received: BTreeSet<usize>,
    /// Completed unit partials keyed by rank so the merge order is fixed.
    partials: BTreeMap<usize, Vec<(String, LevelPartial)>>,
}

impl Server {
    fn run(self, inbox: Receiver<Envelope>) -> ServerOutcome {
        let (unit_tx, unit_rx) = unbounded::<UnitResult>();
        let mut out = ServerOutcome {
            compute_seconds: 0.0,
            arrivals: Vec::new(),
            submit_seconds: Vec::new(),
            errors: Vec::new(),
        };
        let mut extents: HashMap<usize, SlabExtent> = HashMap::new();
        let mut pending: BTreeMap<(u64, String), Pending> = BTreeMap::new();
        let mut opened: BTreeSet<u64> = BTreeSet::new();
        let mut dropped: BTreeSet<u64> = BTreeSet::new();
        let mut outstanding = 0usize;
        let mut inbox_open = true;
        let tick = (self.options.stale_timeout / 4).clamp(Duration::from_millis(10), Duration::from_secs(1));

        while inbox_open || outstanding > 0 {
            let inbox_ref = if inbox_open { Some(&inbox) } else { None };
            select! {
                recv(inbox_ref.unwrap_or(&crossbeam_channel::never())) -> env => match env {
                    Err(_) => inbox_open = false,
                    Ok(Envelope::Register { rank, extent, reply }) => {
                        let status = if !self.served.contains(&rank) {
                            Err(format!("server {} does not serve rank {rank}", self.index))
                        } else if extent.nz != self.nz {
                            Err(format!("rank {rank} registered {} levels, expected {}", extent.nz, self.nz))
                        } else {
                            extents.insert(rank, extent);
                            Ok(())
                        };
                        let _ = reply.send(status);
                    }
                    Ok(Envelope::Done { rank, submit_seconds }) => {
                        out.submit_seconds.push((rank, submit_seconds));
                    }
                    Ok(Envelope::Data(msg)) => {
                        out.arrivals.push(Arrival {
                            rank: msg.source_rank,
                            timestep: msg.timestep,
                            field: msg.field.clone(),
                        });
                        if let Err(e) = self.check(&extents, &msg) {
                            out.errors.push(e);
                            continue;
                        }
                        if dropped.contains(&msg.timestep) {
                            continue;
                        }
                        let key = (msg.timestep, msg.field.clone());
                        let entry = pending.entry(key).or_insert_with(|| Pending {
                            first_seen: Instant::now(),
                            received: BTreeSet::new(),
                            partials: BTreeMap::new(),
                        });
                        if !entry.received.insert(msg.source_rank) {
                            out.errors.push(format!(
                                "duplicate `{}` slab from rank {} at timestep {}",
                                msg.field, msg.source_rank, msg.timestep
                            ));
                            continue;
                        }
                        if opened.insert(msg.timestep) {
                            let _ = self.sink.send(SinkMsg::Open(msg.timestep));
                        }
                        outstanding += 1;
                        self.dispatch(msg, unit_tx.clone());
                    }
                },
                recv(unit_rx) -> unit => {
                    let unit = unit.expect("unit sender held locally");
                    outstanding -= 1;
                    out.compute_seconds += unit.seconds;
                    if let Some(e) = unit.error {
                        out.errors.push(e);
                    }
                    let key = (unit.timestep, unit.field);
                    let Some(entry) = pending.get_mut(&key) else { continue };
                    entry.partials.insert(unit.rank, unit.partials);
                    if entry.partials.len() == self.served.len() {
                        let entry = pending.remove(&key).unwrap();
                        self.forward(key.0, entry);
                    }
                },
                default(tick) => {}
            }
            let now = Instant::now();
            let stale: Vec<(u64, String)> = pending
                .iter()
                .filter(|(_, p)| now.duration_since(p.first_seen) > self.options.stale_timeout)
                .map(|(k, _)| k.clone())
                .collect();
            for key in stale {
                let p = pending.remove(&key).unwrap();
                self.drop_timestep(&key, &p, &mut out.errors, &mut dropped);
            }
        }
        for (key, p) in std::mem::take(&mut pending) {
            self.drop_timestep(&key, &p, &mut out.errors, &mut dropped);
        }
        out
    }

    fn check(&self, extents: &HashMap<usize, SlabExtent>, msg: &DiagnosticMessage) -> std::result::Result<(), String> {
        match extents.get(&msg.source_rank) {
            None => Err(format!("slab from unregistered rank {}", msg.source_rank)),
            Some(e) if *e != msg.extent || msg.data.len() != e.points() => Err(format!(
                "slab from rank {} does not match its registered extent",
                msg.source_rank
            )),
            Some(_) if self.config.request(&msg.field).is_none() => {
                Err(format!("rank {} sent unrequested field `{}`", msg.source_rank, msg.field))
            }
            Some(_) => Ok(()),
        }
    }

    fn dispatch(&self, msg: DiagnosticMessage, done: Sender<UnitResult>) {
        let actions: Vec<DiagnosticAction> = self
            .config
            .actions
            .iter()
            .filter(|a| a.field == msg.field)
            .cloned()
            .collect();
        let (nz, delay) = (self.nz, self.options.action_delay);
        self.pool.spawn(move || {
            let start = Instant::now();
            let mut partials = Vec::with_capacity(actions.len());
            let mut error = None;
            for a in &actions {
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                match horizontal_reduction(a, &[&msg], nz) {
                    Ok(p) => partials.push((a.output.clone(), p)),
                    Err(e) => error = Some(e.to_string()),
                }
            }
            let _ = done.send(UnitResult {
                timestep: msg.timestep,
                field: msg.field,
                rank: msg.source_rank,
                partials,
                seconds: start.elapsed().as_secs_f64(),
                error,
            });
        });
    }

    fn forward(&self, timestep: u64, entry: Pending) {
        let mut merged: BTreeMap<String, LevelPartial> = BTreeMap::new();
        for (_, partials) in entry.partials {
            for (output, p) in partials {
                match merged.get_mut(&output) {
                    Some(acc) => acc.merge(&p),
                    None => {
                        merged.insert(output, p);
                    }
                }
            }
        }
        for (output, partial) in merged {
            let _ = self.sink.send(SinkMsg::Partial {
                output,
                partial: ServerPartial {
                    server: self.index,
                    timestep,
                    partial,
                },
            });
        }
    }

    fn drop_timestep(
        &self,
        key: &(u64, String),
        p: &Pending,
        errors: &mut Vec<String>,
        dropped: &mut BTreeSet<u64>,
    ) {
        let absent: Vec<usize> = self.served.difference(&p.received).copied().collect();
        errors.push(format!(
            "server {}: dropped incomplete `{}` at timestep {}; missing ranks {:?}",
            self.index, key.1, key.0, absent
        ));
        if dropped.insert(key.0) {
            let _ = self.sink.send(SinkMsg::Dropped(key.0));
        }
    }
}

fn run_sink(
    inbox: Receiver<SinkMsg>,
    config: Arc<IoServerConfig>,
    nservers: usize,
    mut writer: DiagnosticsWriter,
) -> SinkOutcome {
    let mut out = SinkOutcome {
        results: BTreeMap::new(),
        dropped: Vec::new(),
        rows: 0,
        errors: Vec::new(),
    };
    // Timesteps some server has started on and not yet written or dropped.
    let mut open: BTreeSet<u64> = BTreeSet::new();
    let mut gone: BTreeSet<u64> = BTreeSet::new();
    let mut partials: BTreeMap<(u64, String), Vec<ServerPartial>> = BTreeMap::new();
    let mut done: BTreeMap<u64, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut write_failed = false;

    let due_outputs = |t: u64| -> BTreeSet<String> { config.actions_due(t).map(|a| a.output.clone()).collect() };

    for msg in inbox {
        match msg {
            SinkMsg::Open(t) => {
                if !gone.contains(&t) {
                    open.insert(t);
                }
            }
            SinkMsg::Dropped(t) => {
                if gone.insert(t) {
                    open.remove(&t);
                    done.remove(&t);
                    partials.retain(|k, _| k.0 != t);
                    out.dropped.push(t);
                }
            }
            SinkMsg::Partial { output, partial } => {
                let t = partial.timestep;
                if gone.contains(&t) {
                    continue;
                }
                let key = (t, output);
                let list = partials.entry(key.clone()).or_default();
                list.push(partial);
                if list.len() == nservers {
                    let list = partials.remove(&key).unwrap();
                    let op = list[0].partial.operator;
                    match combine_partials(&list, op) {
                        Ok(v) => {
                            done.entry(t).or_default().insert(key.1, v);
                        }
                        Err(e) => out.errors.push(format!("timestep {t} `{}`: {e}", key.1)),
                    }
                }
            }
        }
        // Flush complete timesteps in ascending order, never past an open one.
        while let Some(&t) = open.first() {
            let complete = done.get(&t).is_some_and(|d| d.len() == due_outputs(t).len());
            let pure_sink = due_outputs(t).is_empty();
            if !(complete || pure_sink) {
                break;
            }
            open.pop_first();
            gone.insert(t);
            let rows = done.remove(&t).unwrap_or_default();
            if !write_failed && !rows.is_empty() {
                match writer.write_timestep(t, &rows) {
                    Ok(()) => {}
                    Err(e) => {
                        write_failed = true;
                        out.errors.push(e.to_string());
                    }
                }
            }
            for (name, v) in rows {
                out.results.insert((t, name), v);
            }
        }
    }
    for t in open {
        out.errors.push(format!("timestep {t} never completed; dropped"));
        out.dropped.push(t);
    }
    out.rows = writer.rows();
    out
}

enum Link {
    Local(Sender<Envelope>),
    Remote(BufWriter<TcpStream>),
}

/// Model-side endpoint of the diagnostics servers.
///
/// `submit_field` returns as soon as the slab is queued. It blocks only while
/// the server's bounded queue is full.
pub struct IoBridge {
    rank: usize,
    config: Arc<IoServerConfig>,
    link: Link,
    submit_seconds: f64,
    closed: bool,
}

impl IoBridge {
    /// Handshake with a cluster listening at `addr` from another process.
    pub fn connect(addr: &str, layout: &PencilLayout, config: IoServerConfig) -> Result<Self> {
        let rank = layout.rank;
        let sock = |e| Error::from(CommError::Socket(e));
        let stream = TcpStream::connect(addr).map_err(sock)?;
        stream.set_nodelay(true).map_err(sock)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(sock)?);
        let mut writer = BufWriter::new(stream);
        let mut payload = Vec::new();
        SlabExtent::of(layout).encode(&mut payload);
        write_frame(&mut writer, &Frame { tag: TAG_REGISTER, source: rank as u32, payload }).map_err(sock)?;
        let ack = read_frame(&mut reader).map_err(sock)?;
        if ack.tag != TAG_ACK || !ack.payload.is_empty() {
            return Err(CommError::Protocol(String::from_utf8_lossy(&ack.payload).into_owned()).into());
        }
        Ok(IoBridge {
            rank,
            config: Arc::new(config),
            link: Link::Remote(writer),
            submit_seconds: 0.0,
            closed: false,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn config(&self) -> &IoServerConfig {
        &self.config
    }

    pub fn submit_seconds(&self) -> f64 {
        self.submit_seconds
    }

    pub fn submit_field(&mut self, msg: DiagnosticMessage) -> Result<()> {
        let start = Instant::now();
        let rank = self.rank;
        let result = match &mut self.link {
            Link::Local(tx) => tx
                .send(Envelope::Data(msg))
                .map_err(|_| CommError::Disconnected { rank, peer: usize::MAX }),
            Link::Remote(w) => write_frame(
                w,
                &Frame {
                    tag: TAG_DATA,
                    source: rank as u32,
                    payload: msg.encode(),
                },
            )
            .map_err(CommError::Socket),
        };
        self.submit_seconds += start.elapsed().as_secs_f64();
        Ok(result?)
    }

    /// Tells the server this rank is finished.
    pub fn close(&mut self) -> Result<()> {
        if std::mem::replace(&mut self.closed, true) {
            return Ok(());
        }
        let (rank, submit_seconds) = (self.rank, self.submit_seconds);
        match &mut self.link {
            Link::Local(tx) => tx
                .send(Envelope::Done { rank, submit_seconds })
                .map_err(|_| CommError::Disconnected { rank, peer: usize::MAX }.into()),
            Link::Remote(w) => write_frame(
                w,
                &Frame {
                    tag: TAG_DONE,
                    source: rank as u32,
                    payload: submit_seconds.to_le_bytes().to_vec(),
                },
            )
            .and_then(|_| w.flush())
            .map_err(|e| CommError::Socket(e).into()),
        }
    }
}

impl Drop for IoBridge {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose, Field3D, GlobalGrid};
    use crate::io::config::parse_io_config;

    fn config(path: &std::path::Path, cadence: u64) -> IoServerConfig {
        let xml = format!(
            r#"<io-config><fields><field name="theta" cadence="{cadence}"/></fields><actions>
               <action kind="horizontal_reduction" field="theta" operator="mean" output="theta_mean"/>
               <action kind="horizontal_reduction" field="theta" operator="max" output="theta_max"/>
               </actions><output path="{}"/></io-config>"#,
            path.display()
        );
        parse_io_config(&xml).unwrap()
    }

    fn field(layout: &PencilLayout, t: u64) -> Field3D<f64> {
        Field3D::from_global_fn(layout, |k, j, i| (k * 100 + j * 10 + i) as f64 + t as f64 * 0.5)
    }

    #[test]
    fn four_ranks_two_servers_match_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let grid = GlobalGrid::unit(3, 4, 4).unwrap();
        let layouts = decompose(grid, 4).unwrap();
        let opts = IoServerOptions {
            ios_ratio: 2,
            ..IoServerOptions::default()
        };
        let cluster = IoCluster::start(config(&path, 2), opts, 4, 3).unwrap();
        assert_eq!(cluster.servers(), 2);
        std::thread::scope(|s| {
            for l in &layouts {
                let mut bridge = cluster.bridge(l).unwrap();
                s.spawn(move || {
                    for t in 1..=6u64 {
                        if t % 2 == 0 {
                            bridge.submit_field(DiagnosticMessage::from_field(l, t, "theta", &field(l, t))).unwrap();
                        }
                    }
                });
            }
        });
        let report = cluster.finish().unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        assert_eq!(report.results.len(), 6);
        for t in [2u64, 4, 6] {
            let mean = &report.results[&(t, "theta_mean".to_string())];
            let max = &report.results[&(t, "theta_max".to_string())];
            for k in 0..3 {
                let base = (k * 100) as f64 + t as f64 * 0.5;
                assert!((mean[k] - (base + 15.0 + 1.5)).abs() < 1e-12);
                assert_eq!(max[k], base + 33.0);
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2 * 3);
        assert_eq!(report.rows_written, 18);
    }

    #[test]
    fn per_sender_fifo_and_pure_sink() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let cfg = parse_io_config(&format!(
            r#"<io-config><fields><field name="theta"/></fields><actions/><output path="{}"/></io-config>"#,
            path.display()
        ))
        .unwrap();
        let grid = GlobalGrid::unit(2, 2, 2).unwrap();
        let layouts = decompose(grid, 2).unwrap();
        let cluster = IoCluster::start(cfg, IoServerOptions::default(), 2, 2).unwrap();
        std::thread::scope(|s| {
            for l in &layouts {
                let mut b = cluster.bridge(l).unwrap();
                s.spawn(move || {
                    for t in 1..=10 {
                        b.submit_field(DiagnosticMessage::from_field(l, t, "theta", &field(l, t))).unwrap();
                    }
                });
            }
        });
        let report = cluster.finish().unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        for r in 0..2 {
            let seen: Vec<u64> = report.arrivals[0].iter().filter(|a| a.rank == r).map(|a| a.timestep).collect();
            assert_eq!(seen, (1..=10).collect::<Vec<_>>());
        }
        assert!(report.results.is_empty());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "output,timestep,level,value\n");
    }

    #[test]
    fn missing_rank_drops_timestep() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let grid = GlobalGrid::unit(2, 2, 2).unwrap();
        let layouts = decompose(grid, 2).unwrap();
        let opts = IoServerOptions {
            stale_timeout: Duration::from_millis(50),
            ..IoServerOptions::default()
        };
        let cluster = IoCluster::start(config(&path, 1), opts, 2, 2).unwrap();
        let mut b0 = cluster.bridge(&layouts[0]).unwrap();
        let mut b1 = cluster.bridge(&layouts[1]).unwrap();
        for l in [&layouts[0], &layouts[1]] {
            let b = if l.rank == 0 { &mut b0 } else { &mut b1 };
            b.submit_field(DiagnosticMessage::from_field(l, 1, "theta", &field(l, 1))).unwrap();
        }
        b0.submit_field(DiagnosticMessage::from_field(&layouts[0], 2, "theta", &field(&layouts[0], 2)))
            .unwrap();
        std::thread::sleep(Duration::from_millis(300));
        drop((b0, b1));
        let report = cluster.finish().unwrap();
        assert_eq!(report.dropped, vec![2]);
        assert!(report.errors.iter().any(|e| e.contains("missing ranks [1]")), "{:?}", report.errors);
        assert_eq!(report.results.len(), 2);
    }

    #[test]
    fn extent_mismatch_rejected_at_server() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GlobalGrid::unit(2, 2, 2).unwrap();
        let layouts = decompose(grid, 2).unwrap();
        let cluster = IoCluster::start(config(&dir.path().join("d.csv"), 1), IoServerOptions::default(), 2, 2).unwrap();
        let mut b = cluster.bridge(&layouts[0]).unwrap();
        b.submit_field(DiagnosticMessage::from_field(&layouts[1], 1, "theta", &field(&layouts[1], 1)))
            .unwrap();
        drop(b);
        let report = cluster.finish().unwrap();
        assert!(report.errors.iter().any(|e| e.contains("unregistered") || e.contains("extent")));
    }

    #[test]
    fn remote_bridge_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let grid = GlobalGrid::unit(2, 2, 2).unwrap();
        let layouts = decompose(grid, 1).unwrap();
        let mut cluster = IoCluster::start(config(&path, 1), IoServerOptions::default(), 1, 2).unwrap();
        let addr = cluster.listen().unwrap();
        let cfg = cluster.config().as_ref().clone();
        let mut b = IoBridge::connect(&addr, &layouts[0], cfg).unwrap();
        for t in 1..=3 {
            b.submit_field(DiagnosticMessage::from_field(&layouts[0], t, "theta", &field(&layouts[0], t)))
                .unwrap();
        }
        b.close().unwrap();
        drop(b);
        // The forwarding thread finishes asynchronously after the close frame.
        std::thread::sleep(Duration::from_millis(100));
        let report = cluster.finish().unwrap();
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        assert_eq!(report.results.len(), 6);
    }
}
