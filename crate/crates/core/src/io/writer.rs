use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["output", "timestep", "level", "value"];

/// Diagnostics CSV sink. Rows for one timestep are formatted in memory and
/// written with a single write and flush, so a failure never leaves a
/// partial timestep behind.
pub struct DiagnosticsWriter {
    path: PathBuf,
    file: File,
    rows: usize,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        let header = w.into_inner().expect("in-memory write");
        file.write_all(&header)
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))?;
        Ok(DiagnosticsWriter {
            path: path.to_owned(),
            file,
            rows: 0,
        })
    }

    /// Writes `(output, per-level values)` for one timestep, ordered by
    /// output name then level. Levels are numbered from 1.
    pub fn write_timestep(&mut self, timestep: u64, results: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut n = 0;
        for (output, values) in results {
            for (k, v) in values.iter().enumerate() {
                w.write_record([
                    output.as_str(),
                    &timestep.to_string(),
                    &(k + 1).to_string(),
                    &v.to_string(),
                ])
                .expect("in-memory write");
                n += 1;
            }
        }
        let buf = w.into_inner().expect("in-memory write");
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.rows += n;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Writes a complete result set sorted by `(timestep, output, level)`.
pub fn write_diagnostics(results: &BTreeMap<(u64, String), Vec<f64>>, path: &Path) -> Result<()> {
    let mut w = DiagnosticsWriter::create(path)?;
    let mut by_step: BTreeMap<u64, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for ((t, out), v) in results {
        by_step.entry(*t).or_default().insert(out.clone(), v.clone());
    }
    for (t, outs) in &by_step {
        w.write_timestep(*t, outs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_levels_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut r = BTreeMap::new();
        r.insert((5, "theta_mean".to_string()), vec![1.0, 2.0]);
        write_diagnostics(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "output,timestep,level,value\ntheta_mean,5,1,1\ntheta_mean,5,2,2\n");
    }

    #[test]
    fn no_results_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_diagnostics(&BTreeMap::new(), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "output,timestep,level,value\n");
    }

    #[test]
    fn out_of_order_results_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut r = BTreeMap::new();
        for t in [30u64, 10, 20] {
            r.insert((t, "b".to_string()), vec![t as f64]);
            r.insert((t, "a".to_string()), vec![-(t as f64)]);
        }
        write_diagnostics(&r, &p).unwrap();
        let rows: Vec<String> = std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
            .collect();
        assert_eq!(rows, ["a,10", "b,10", "a,20", "b,20", "a,30", "b,30"]);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = DiagnosticsWriter::create(Path::new("/nonexistent-dir/x/d.csv")).err().unwrap();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn values_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let v = 0.1f64 + 0.2;
        let mut r = BTreeMap::new();
        r.insert((1, "x".to_string()), vec![v]);
        write_diagnostics(&r, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let parsed: f64 = text.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(parsed.to_bits(), v.to_bits());
    }
}
