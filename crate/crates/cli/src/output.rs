//! Result files: one CSV schema shared by every subcommand, JSON manifests,
//! and the appender that is the only writer of either.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Bumped whenever a column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// One CSV line. Columns that do not apply to a record kind stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// `run`, `bench` or `bound`.
    pub record: String,
    pub csv_schema: u32,
    pub config_hash: String,
    pub encoder_id: Option<String>,
    pub decoder_id: Option<String>,
    pub estimator: Option<String>,
    pub snr_db: Option<f64>,
    pub sigma: Option<f64>,
    pub n_tau: Option<usize>,
    pub trial: Option<usize>,
    pub accuracy: Option<f64>,
    pub lower_bound: Option<f64>,
    pub lower_bound_std_error: Option<f64>,
    pub alignment_error: Option<f64>,
    pub alignment_error_inf: Option<f64>,
    pub operation: Option<String>,
    pub d: Option<usize>,
    pub repetitions: Option<usize>,
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub mean_ms: Option<f64>,
    pub measured_gap: Option<f64>,
    pub gap_std_error: Option<f64>,
    pub rho: Option<f64>,
    pub rho_empirical: Option<f64>,
    pub m_minus_i_inf: Option<f64>,
    pub rhs: Option<f64>,
    pub rhs_rho_free: Option<f64>,
    pub slack: Option<f64>,
    pub slack_rho_free: Option<f64>,
}

impl ResultRow {
    pub fn new(record: &str, config_hash: &str) -> Self {
        ResultRow {
            record: record.into(),
            csv_schema: CSV_SCHEMA_VERSION,
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }
}

/// Conventions a reader needs to interpret the numbers.
pub fn conventions() -> Value {
    serde_json::json!({
        "power": toc_align::channel::POWER_CONVENTION,
        "snr": "SNR = 1 / sigma^2 per real symbol; sigma = 10^(-snr_db / 20)",
        "noise": "i.i.d. N(0, sigma^2) per symbol; independent per (channel seed, stream)",
        "mmse_regularizer": "2 * n_tau * sigma^2",
        "accuracy": "top-1 on the test split",
        "lower_bound": "mean log p(label | received features) over the test split and noise draws",
        "alignment_error": "|M_hat - M|_F against the known map in the normalized feature domain; empty when no map is known or the estimate is not linear",
        "rho": "2 * product of decoder layer induced infinity norms (log-softmax is 2-Lipschitz in the infinity norm)",
        "bound_rhs": "rho * sigma * sqrt(2 ln d) * |M - I|_inf; rhs_rho_free omits rho",
        "timings": "median and p95 by nearest rank; warm-up excluded; operations interleaved one repetition at a time",
    })
}

/// Everything that makes a results directory self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub csv_schema: u32,
    pub csv_file: String,
    pub rows: usize,
    pub config: ExperimentConfig,
    pub seeds: Value,
    pub conventions: Value,
    /// Subcommand-specific detail, e.g. environment fingerprints or full
    /// bound reports.
    pub details: Value,
}

/// Writes `bytes` next to `path` and renames it into place, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = partial_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// The single writer of a result CSV.
///
/// Jobs may finish in any order; each submits its rows with its cell index
/// and rows reach the file in index order, so output is independent of
/// scheduling. Rows go to a `.partial` file that becomes visible under its
/// final name only after every expected cell has arrived. Dropping an
/// unfinished appender deletes the partial file.
pub struct Appender {
    final_path: PathBuf,
    partial_path: PathBuf,
    writer: Option<csv::Writer<BufWriter<File>>>,
    expected_cells: usize,
    next_cell: usize,
    pending: BTreeMap<usize, Vec<ResultRow>>,
    rows: usize,
    config_hash: String,
}

impl Appender {
    pub fn create(path: &Path, expected_cells: usize, config_hash: &str) -> Result<Self, CliError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let partial = partial_path(path);
        let writer = csv::Writer::from_writer(BufWriter::new(File::create(&partial)?));
        Ok(Appender {
            final_path: path.to_path_buf(),
            partial_path: partial,
            writer: Some(writer),
            expected_cells,
            next_cell: 0,
            pending: BTreeMap::new(),
            rows: 0,
            config_hash: config_hash.into(),
        })
    }

    pub fn submit(&mut self, cell: usize, rows: Vec<ResultRow>) -> Result<(), CliError> {
        if cell >= self.expected_cells || cell < self.next_cell || self.pending.contains_key(&cell)
        {
            return Err(CliError::Validation(vec![format!(
                "cell {cell} submitted twice or out of range"
            )]));
        }
        if let Some(bad) = rows.iter().find(|r| r.config_hash != self.config_hash) {
            return Err(CliError::Validation(vec![format!(
                "row carries config hash {} instead of {}",
                bad.config_hash, self.config_hash
            )]));
        }
        self.pending.insert(cell, rows);
        let writer = self.writer.as_mut().expect("writer open until finish");
        while let Some(rows) = self.pending.remove(&self.next_cell) {
            for r in &rows {
                writer.serialize(r)?;
            }
            self.rows += rows.len();
            self.next_cell += 1;
        }
        Ok(())
    }

    /// Publishes the CSV under its final name and returns the row count.
    /// Fails, and publishes nothing, if any cell is missing.
    pub fn finish(mut self) -> Result<usize, CliError> {
        if self.next_cell != self.expected_cells {
            return Err(CliError::Validation(vec![format!(
                "only {} of {} cells completed",
                self.next_cell, self.expected_cells
            )]));
        }
        let writer = self.writer.take().expect("writer open until finish");
        let file = writer
            .into_inner()
            .map_err(|e| CliError::Io(e.into_error()))?
            .into_inner()
            .map_err(|e| CliError::Io(e.into_error()))?;
        file.sync_all()?;
        fs::rename(&self.partial_path, &self.final_path)?;
        Ok(self.rows)
    }
}

impl Drop for Appender {
    fn drop(&mut self) {
        if self.writer.is_some() {
            self.writer = None;
            let _ = fs::remove_file(&self.partial_path);
        }
    }
}

/// Runs `cells` jobs on at most `jobs` threads and streams their rows
/// through `appender` on the calling thread. The first error stops new
/// jobs from starting and is returned; the appender is then dropped, so no
/// CSV appears.
pub fn run_cells<F>(
    jobs: usize,
    cells: usize,
    mut appender: Appender,
    job: F,
) -> Result<usize, CliError>
where
    F: Fn(usize) -> Result<Vec<ResultRow>, CliError> + Sync,
{
    use rayon::prelude::*;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::mpsc;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Validation(vec![format!("cannot start {jobs} jobs: {e}")]))?;
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<ResultRow>, CliError>)>();
    let mut first_error = None;
    std::thread::scope(|scope| {
        let stop = &stop;
        let job = &job;
        scope.spawn(move || {
            pool.install(|| {
                (0..cells).into_par_iter().for_each_with(tx, |tx, cell| {
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    let out = job(cell);
                    if out.is_err() {
                        stop.store(true, Ordering::Relaxed);
                    }
                    let _ = tx.send((cell, out));
                });
            });
        });
        for (cell, out) in rx {
            if first_error.is_some() {
                continue;
            }
            let res = out.and_then(|rows| appender.submit(cell, rows));
            if let Err(e) = res {
                stop.store(true, Ordering::Relaxed);
                first_error = Some(e);
            }
        }
    });
    match first_error {
        Some(e) => Err(e),
        None => appender.finish(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(cell: usize, n: usize) -> Vec<ResultRow> {
        (0..n)
            .map(|t| ResultRow {
                trial: Some(t),
                n_tau: Some(cell),
                ..ResultRow::new("run", "h")
            })
            .collect()
    }

    fn read(path: &Path) -> Vec<ResultRow> {
        csv::Reader::from_path(path)
            .unwrap()
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap()
    }

    #[test]
    fn out_of_order_cells_land_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut a = Appender::create(&path, 3, "h").unwrap();
        a.submit(2, rows(2, 1)).unwrap();
        a.submit(0, rows(0, 2)).unwrap();
        assert!(!path.exists());
        a.submit(1, rows(1, 1)).unwrap();
        assert_eq!(a.finish().unwrap(), 4);
        let cells: Vec<_> = read(&path).iter().map(|r| r.n_tau.unwrap()).collect();
        assert_eq!(cells, vec![0, 0, 1, 2]);
    }

    #[test]
    fn missing_cells_publish_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut a = Appender::create(&path, 2, "h").unwrap();
        a.submit(0, rows(0, 1)).unwrap();
        assert!(a.finish().is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rejects_duplicates_and_foreign_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Appender::create(&dir.path().join("r.csv"), 2, "h").unwrap();
        a.submit(0, rows(0, 1)).unwrap();
        assert!(a.submit(0, rows(0, 1)).is_err());
        assert!(a.submit(5, rows(5, 1)).is_err());
        assert!(a.submit(1, vec![ResultRow::new("run", "other")]).is_err());
    }

    #[test]
    fn parallel_cells_are_deterministic_and_errors_publish_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let n = run_cells(4, 20, Appender::create(&path, 20, "h").unwrap(), |c| {
            Ok(rows(c, c % 3))
        })
        .unwrap();
        let first = fs::read(&path).unwrap();
        assert_eq!(n, (0..20).map(|c| c % 3).sum::<usize>());
        run_cells(1, 20, Appender::create(&path, 20, "h").unwrap(), |c| {
            Ok(rows(c, c % 3))
        })
        .unwrap();
        assert_eq!(first, fs::read(&path).unwrap());

        let bad = dir.path().join("bad.csv");
        let err = run_cells(3, 20, Appender::create(&bad, 20, "h").unwrap(), |c| {
            if c == 7 {
                Err(CliError::Numerical("boom".into()))
            } else {
                Ok(rows(c, 1))
            }
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!bad.exists() && !partial_path(&bad).exists());
    }

    #[test]
    fn nulls_are_empty_fields() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(ResultRow::new("bench", "h")).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("record,csv_schema,config_hash,encoder_id"));
        assert!(lines.next().unwrap().starts_with("bench,1,h,,,"));
    }
}
