use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma, transmit, ChannelSpec};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ft, estimate_gd, estimate_ls, estimate_mmse, GdConfig};
use crate::features::{make_ground_truth_transform, TransformKind};
use crate::matrix::FeatureMatrix;
use crate::rng;

pub const MIN_REPETITIONS: usize = 100;
const WARMUP: usize = 5;
const BENCH_SNR_DB: f64 = 6.0;
const FT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchOperation {
    Ls,
    Mmse,
    Gd,
    Ft,
    /// Relative-representation path: the server estimates nothing.
    OnDevice,
}

impl BenchOperation {
    pub const ALL: [BenchOperation; 5] = [Self::Ls, Self::Mmse, Self::Gd, Self::Ft, Self::OnDevice];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ls => "ls",
            Self::Mmse => "mmse",
            Self::Gd => "gd",
            Self::Ft => "ft",
            Self::OnDevice => "on-device",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub optimized_build: bool,
    pub library_version: String,
}

impl EnvironmentFingerprint {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        EnvironmentFingerprint {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            cpu_model,
            optimized_build: !cfg!(debug_assertions),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub operation: BenchOperation,
    pub d: usize,
    pub n_tau: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub environment: EnvironmentFingerprint,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

struct Workload {
    rx1: FeatureMatrix,
    rx2: FeatureMatrix,
    sigma: f64,
    n_tau: usize,
    gd: GdConfig,
    ft: GdConfig,
}

impl Workload {
    fn new(d: usize, n_tau: usize, seed: u64) -> Result<Self> {
        if d == 0 || n_tau < d {
            return Err(Error::Validation(format!(
                "benchmark needs 1 <= d <= n_tau, got d={d}, n_tau={n_tau}"
            )));
        }
        let truth = make_ground_truth_transform(d, TransformKind::GeneralInvertible, 10.0, seed)?;
        let z1 = FeatureMatrix::new(rng::gaussian_matrix(
            d,
            n_tau,
            1.0,
            &mut rng::stream(seed, 1),
        ));
        let z2 = FeatureMatrix::new(&truth.matrix * z1.as_matrix());
        let sigma = snr_to_sigma(BENCH_SNR_DB);
        let ch = ChannelSpec::from_sigma(sigma, seed)?;
        let gd = GdConfig {
            seed,
            ..GdConfig::default()
        };
        let ft = GdConfig {
            learning_rate: 0.01,
            ..gd.clone()
        };
        Ok(Workload {
            rx1: transmit(&z1, &ch, 0),
            rx2: transmit(&z2, &ch, 1),
            sigma,
            n_tau,
            gd,
            ft,
        })
    }

    /// Milliseconds for one estimate; the on-device path costs nothing.
    fn time(&self, operation: BenchOperation) -> Result<f64> {
        let (x, y) = (&self.rx1, &self.rx2);
        let start = Instant::now();
        match operation {
            BenchOperation::Ls => {
                black_box(estimate_ls(x, y)?);
            }
            BenchOperation::Mmse => {
                black_box(estimate_mmse(x, y, self.sigma, self.n_tau)?);
            }
            BenchOperation::Gd => {
                black_box(estimate_gd(x, y, &self.gd)?);
            }
            BenchOperation::Ft => {
                black_box(estimate_ft(x, y, FT_HIDDEN, &self.ft)?);
            }
            BenchOperation::OnDevice => return Ok(0.0),
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}

fn record(
    operation: BenchOperation,
    d: usize,
    n_tau: usize,
    mut times: Vec<f64>,
    environment: EnvironmentFingerprint,
) -> RuntimeRecord {
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    RuntimeRecord {
        operation,
        d,
        n_tau,
        repetitions: times.len(),
        median_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        mean_ms,
        environment,
    }
}

fn check_repetitions(repetitions: usize) -> Result<()> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Validation(format!(
            "benchmarks need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    Ok(())
}

/// Wall time of one server-side alignment estimate on fixed received
/// anchors. Runs on the calling thread; warm-up runs are discarded.
pub fn benchmark_runtime(
    operation: BenchOperation,
    d: usize,
    n_tau: usize,
    repetitions: usize,
    seed: u64,
) -> Result<RuntimeRecord> {
    check_repetitions(repetitions)?;
    let work = Workload::new(d, n_tau, seed)?;
    for _ in 0..WARMUP {
        work.time(operation)?;
    }
    let times = (0..repetitions)
        .map(|_| work.time(operation))
        .collect::<Result<Vec<_>>>()?;
    Ok(record(
        operation,
        d,
        n_tau,
        times,
        EnvironmentFingerprint::current(),
    ))
}

/// Benchmarks several operations on the same inputs, cycling through them
/// one repetition at a time so that clock and cache drift hit all of them
/// alike. `repetitions[i]` belongs to `operations[i]`; an operation drops
/// out of the cycle once it has its count.
pub fn benchmark_interleaved(
    operations: &[BenchOperation],
    repetitions: &[usize],
    d: usize,
    n_tau: usize,
    seed: u64,
) -> Result<Vec<RuntimeRecord>> {
    if operations.len() != repetitions.len() {
        return Err(Error::DimensionMismatch {
            context: "benchmark_interleaved repetitions",
            expected: operations.len(),
            actual: repetitions.len(),
        });
    }
    for &r in repetitions {
        check_repetitions(r)?;
    }
    let work = Workload::new(d, n_tau, seed)?;
    for &op in operations {
        for _ in 0..WARMUP {
            work.time(op)?;
        }
    }
    let mut times: Vec<Vec<f64>> = repetitions.iter().map(|&r| Vec::with_capacity(r)).collect();
    let longest = repetitions.iter().copied().max().unwrap_or(0);
    for rep in 0..longest {
        for (i, &op) in operations.iter().enumerate() {
            if rep < repetitions[i] {
                times[i].push(work.time(op)?);
            }
        }
    }
    let env = EnvironmentFingerprint::current();
    Ok(operations
        .iter()
        .zip(times)
        .map(|(&op, t)| record(op, d, n_tau, t, env.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_short_runs() {
        assert!(matches!(
            benchmark_runtime(BenchOperation::Ls, 4, 10, 99, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn on_device_costs_nothing() {
        let r = benchmark_runtime(BenchOperation::OnDevice, 16, 100, 100, 0).unwrap();
        assert_eq!((r.median_ms, r.p95_ms), (0.0, 0.0));
    }

    #[test]
    fn ls_record_is_sane() {
        let r = benchmark_runtime(BenchOperation::Ls, 8, 40, 100, 1).unwrap();
        assert!(r.median_ms > 0.0 && r.median_ms <= r.p95_ms);
        assert_eq!(r.environment, EnvironmentFingerprint::current());
    }

    #[test]
    fn interleaved_run_keeps_per_operation_counts() {
        let ops = [
            BenchOperation::Ls,
            BenchOperation::Mmse,
            BenchOperation::OnDevice,
        ];
        let recs = benchmark_interleaved(&ops, &[100, 150, 100], 4, 12, 2).unwrap();
        let counts: Vec<usize> = recs.iter().map(|r| r.repetitions).collect();
        assert_eq!(counts, vec![100, 150, 100]);
        assert_eq!(recs[2].median_ms, 0.0);
        assert!(benchmark_interleaved(&ops, &[100, 100], 4, 12, 2).is_err());
        assert!(benchmark_interleaved(&ops, &[100, 100, 50], 4, 12, 2).is_err());
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
