//! Weak and strong scaling sweeps.

use std::io::Write;
use std::path::Path;

use log::info;

use crate::api::{BenchMode, BenchReport, BenchRequest, BenchRow, RunRequest};
use crate::error::{Error, ErrorCategory, Result};
use crate::simulation::{default_config, run, RunEnv};

pub const BENCH_HEADER: [&str; 8] = ["mode", "workers", "gz", "gy", "gx", "solver", "precision", "seconds"];

/// Global `[z, y, x]` for `workers` ranks that keeps the per-rank cell
/// `base`: z stays fixed while x and y double alternately, x first. `None`
/// unless `workers` is a power of two.
pub fn weak_grid(base: [usize; 3], workers: usize) -> Option<[usize; 3]> {
    if !workers.is_power_of_two() {
        return None;
    }
    let mut g = base;
    for step in 0..workers.trailing_zeros() {
        if step % 2 == 0 {
            g[2] *= 2;
        } else {
            g[1] *= 2;
        }
    }
    Some(g)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every (solver, precision, workers) combination `reps` times and
/// reports the median of the slowest rank's timestep-loop time. Worker
/// counts that cannot be decomposed are skipped, not failed.
pub fn run_bench(req: &BenchRequest, env: &RunEnv) -> Result<BenchReport> {
    if req.reps == 0 || req.steps == 0 {
        return Err(Error::config("bench needs reps >= 1 and steps >= 1"));
    }
    let mut report = BenchReport::default();
    for &solver in &req.solvers {
        for &precision in &req.precisions {
            for &workers in &req.workers {
                let grid = match req.mode {
                    BenchMode::Weak => weak_grid(req.base, workers),
                    BenchMode::Strong => Some(req.base),
                };
                let Some([gz, gy, gx]) = grid else {
                    let why = format!("{solver}/{precision}/W={workers}: weak scaling needs a power-of-two worker count");
                    info!("skipped {why}");
                    report.skipped.push(why);
                    continue;
                };
                let mut run_req = RunRequest {
                    config: Some(req.config.clone().unwrap_or_else(|| default_config(gz, gy, gx))),
                    workers,
                    solver: Some(solver),
                    precision: Some(precision),
                    steps: Some(req.steps),
                    transport: req.transport,
                    ..RunRequest::default()
                };
                for (k, v) in [("z_size", gz), ("y_size", gy), ("x_size", gx)] {
                    run_req.overrides.insert(k.into(), v.to_string());
                }
                // timing runs never drive the I/O server
                run_req.overrides.insert("io_bridge_enabled".into(), ".false.".into());
                let mut times = Vec::with_capacity(req.reps);
                let mut skipped = None;
                for _ in 0..req.reps {
                    match run(&run_req, env) {
                        Ok(s) => times.push(s.loop_seconds),
                        Err(e) if e.category() == ErrorCategory::Config => {
                            skipped = Some(e);
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if let Some(e) = skipped {
                    let why = format!("{solver}/{precision}/W={workers} on {gz}x{gy}x{gx}: {e}");
                    info!("skipped {why}");
                    report.skipped.push(why);
                    continue;
                }
                let seconds = median(times);
                info!("bench {}/{solver}/{precision}/W={workers}: {seconds:.4}s", req.mode);
                report.rows.push(BenchRow {
                    mode: req.mode,
                    workers,
                    gz,
                    gy,
                    gx,
                    solver,
                    precision,
                    seconds,
                });
            }
        }
    }
    sort_rows(&mut report.rows);
    Ok(report)
}

/// Sorts by (mode, solver, precision, workers), comparing the first three
/// as they are written in the CSV.
pub fn sort_rows(rows: &mut [BenchRow]) {
    rows.sort_by(|a, b| {
        let key = |r: &BenchRow| (r.mode.to_string(), r.solver.to_string(), r.precision.to_string(), r.workers);
        key(a).cmp(&key(b))
    });
}

fn write_rows<W: Write>(rows: &[BenchRow], w: &mut csv::Writer<W>) -> csv::Result<()> {
    if rows.is_empty() {
        w.write_record(BENCH_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    write_rows(rows, &mut w).map_err(|e| csv_error(path, e))
}

/// The bench CSV as text.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write_rows(rows, &mut w).expect("writing to memory cannot fail");
    String::from_utf8(w.into_inner().expect("flushed")).expect("csv is utf-8")
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != BENCH_HEADER {
        return Err(Error::Format(format!("unexpected bench header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
