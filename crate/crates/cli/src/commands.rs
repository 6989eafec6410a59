//! The work behind each subcommand.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::json;

use toc_align::channel::ChannelSpec;
use toc_align::estimators::GdConfig;
use toc_align::eval::{
    alignment_error, benchmark_interleaved, check_prop1_bound, top1_accuracy, BoundReport,
    RuntimeRecord,
};
use toc_align::features::{
    generate_task, make_ground_truth_transform, select_anchors, AnchorSet, Dataset,
    GroundTruthTransform, Split, TransformKind,
};
use toc_align::models::{
    align_server_side, cross_model_infer, lower_bound_estimate, train_baseline,
    train_on_device_aligned, transformed_system, Architecture, EstimatorSpec, TocSystem,
    TrainConfig,
};
use toc_align::rng::derive_seed;
use toc_align::{AlignmentMap, Mode};

use crate::config::{EstimatorName, ExperimentConfig, SystemConfig, SystemMode};
use crate::error::CliError;
use crate::output::{conventions, run_cells, write_atomic, Appender, Manifest, ResultRow};

// Seed tags, so that no two consumers of the root seed collide.
const TAG_TRAIN_CHANNEL: u64 = 7;
const TAG_DEVICE_ANCHORS: u64 = 11;
const TAG_EVAL_CHANNEL: u64 = 1000;
const TAG_BOUND_TASK: u64 = 2000;
const TAG_BOUND_TRANSFORM: u64 = 3000;
const TAG_BOUND_CHANNEL: u64 = 4000;

/// What a finished command wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub rows: usize,
    pub config_hash: String,
}

fn file_paths(out_dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{stem}.csv")),
        out_dir.join(format!("{stem}.manifest.json")),
    )
}

#[allow(clippy::too_many_arguments)]
fn publish_manifest(
    path: &Path,
    subcommand: &str,
    cfg: &ExperimentConfig,
    hash: &str,
    csv: &Path,
    rows: usize,
    seeds: serde_json::Value,
    details: serde_json::Value,
) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "toc-align".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: subcommand.into(),
        config_hash: hash.into(),
        csv_schema: crate::output::CSV_SCHEMA_VERSION,
        csv_file: csv
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rows,
        config: cfg.clone(),
        seeds,
        conventions: conventions(),
        details,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig, CliError> {
    let t = &cfg.training;
    let channel = t
        .snr_db
        .map(|snr| ChannelSpec::from_snr_db(snr, derive_seed(seed, TAG_TRAIN_CHANNEL)))
        .transpose()?;
    Ok(TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        noise_samples: t.noise_samples,
        channel,
        seed,
    })
}

fn architecture(s: &SystemConfig, data: &Dataset) -> Architecture {
    Architecture {
        input_dim: data.dim(),
        encoder_hidden: s.encoder_hidden,
        feature_dim: s.feature_dim,
        decoder_hidden: s.decoder_hidden,
        num_classes: data.num_classes,
    }
}

/// A trained (or derived) system and, for derived ones, the map taking its
/// source's normalized features to its own.
struct Built {
    system: TocSystem,
    derived: Option<(String, DMatrix<f64>)>,
}

fn build_systems(
    cfg: &ExperimentConfig,
    train: &Dataset,
    device_anchors: Option<&AnchorSet>,
) -> Result<Vec<Built>, CliError> {
    let trained: Vec<Option<TocSystem>> = cfg
        .systems
        .par_iter()
        .map(|s| -> Result<Option<TocSystem>, CliError> {
            if s.derive.is_some() {
                return Ok(None);
            }
            let arch = architecture(s, train);
            let tc = train_config(cfg, s.seed)?;
            let sys = match s.mode {
                SystemMode::Plain => {
                    train_baseline(&TocSystem::plain(&s.id, &arch, s.seed)?, train, &tc)?
                }
                SystemMode::Relative => {
                    let anchors = &device_anchors
                        .expect("selected when relative systems exist")
                        .samples;
                    let init = TocSystem::relative(&s.id, &arch, anchors.clone(), s.seed)?;
                    train_on_device_aligned(&init, train, anchors, &tc)?
                }
            };
            Ok(Some(sys))
        })
        .collect::<Result<_, _>>()?;

    let mut built = Vec::with_capacity(cfg.systems.len());
    for (s, t) in cfg.systems.iter().zip(&trained) {
        built.push(match (t, &s.derive) {
            (Some(sys), _) => Built {
                system: sys.clone(),
                derived: None,
            },
            (None, Some(der)) => {
                let src = cfg
                    .systems
                    .iter()
                    .position(|o| o.id == der.from)
                    .and_then(|i| trained[i].as_ref())
                    .expect("validated: derive.from names a trained system");
                let truth = make_ground_truth_transform(
                    src.encoder.output_dim(),
                    der.transform.kind(),
                    1.0,
                    der.seed,
                )?;
                let system = transformed_system(src, &truth.matrix, &s.id)?;
                // Power normalization removes the scale of `c Q`.
                let scale = truth.matrix.column(0).norm();
                Built {
                    system,
                    derived: Some((der.from.clone(), truth.matrix / scale)),
                }
            }
            (None, None) => unreachable!("untrained systems are derived"),
        });
    }
    Ok(built)
}

/// Known map from the normalized features of `enc` to those of `dec`.
fn known_map(enc: &Built, dec: &Built) -> Option<GroundTruthTransform> {
    let wrap = |matrix: DMatrix<f64>| GroundTruthTransform {
        matrix,
        kind: TransformKind::Orthogonal,
        condition_number: 1.0,
    };
    if enc.system.id == dec.system.id {
        return Some(GroundTruthTransform::identity(
            enc.system.encoder.output_dim(),
        ));
    }
    match (&enc.derived, &dec.derived) {
        (_, Some((from, q))) if *from == enc.system.id => Some(wrap(q.clone())),
        (Some((from, q)), _) if *from == dec.system.id => Some(wrap(q.transpose())),
        _ => None,
    }
}

fn estimator_spec(cfg: &ExperimentConfig, name: EstimatorName, seed: u64) -> Option<EstimatorSpec> {
    match name {
        EstimatorName::None => None,
        EstimatorName::Ls => Some(EstimatorSpec::Ls),
        EstimatorName::Mmse => Some(EstimatorSpec::Mmse),
        EstimatorName::Gd => Some(EstimatorSpec::Gd {
            config: GdConfig {
                learning_rate: cfg.gd.learning_rate,
                epochs: cfg.gd.epochs,
                init: cfg.gd.init,
                seed,
                ..GdConfig::default()
            },
        }),
        EstimatorName::Ft => Some(EstimatorSpec::Ft {
            hidden_width: cfg.ft.hidden_width,
            config: GdConfig {
                learning_rate: cfg.ft.learning_rate,
                epochs: cfg.ft.epochs,
                seed,
                ..GdConfig::default()
            },
        }),
    }
}

/// One grid cell: an encoder/decoder pair, an alignment method and an SNR.
#[derive(Debug, Clone, Copy)]
struct Cell {
    enc: usize,
    dec: usize,
    /// `None` for the on-device path of relative systems.
    estimator: Option<EstimatorName>,
    snr: usize,
}

fn grid(cfg: &ExperimentConfig, built: &[Built]) -> (Vec<Cell>, Vec<String>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (e, enc) in built.iter().enumerate() {
        for (d, dec) in built.iter().enumerate() {
            if enc.system.mode != dec.system.mode {
                skipped.push(format!(
                    "{} -> {}: {:?} encoder cannot feed a {:?} decoder",
                    enc.system.id, dec.system.id, enc.system.mode, dec.system.mode
                ));
                continue;
            }
            let methods: Vec<Option<EstimatorName>> = match enc.system.mode {
                Mode::Plain => cfg.estimators.iter().copied().map(Some).collect(),
                Mode::Relative => vec![None],
            };
            for estimator in methods {
                for snr in 0..cfg.snr_db.len() {
                    cells.push(Cell {
                        enc: e,
                        dec: d,
                        estimator,
                        snr,
                    });
                }
            }
        }
    }
    (cells, skipped)
}

/// Trains every system, evaluates the full encoder x decoder grid and
/// writes `run.csv` plus `run.manifest.json`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, jobs: usize) -> Result<Outcome, CliError> {
    let hash = cfg.hash();
    let (csv_path, manifest_path) = file_paths(out_dir, "run");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Validation(vec![format!("cannot start {jobs} jobs: {e}")]))?;

    let data = generate_task(&cfg.task.to_spec())?;
    let train = data.split(Split::Train);
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::Validation(vec![
            "task.test_fraction leaves no test samples".into(),
        ]));
    }
    let any = |m| cfg.systems.iter().any(|s| s.mode == m);
    let server_anchors = any(SystemMode::Plain)
        .then(|| {
            select_anchors(
                &train,
                cfg.anchors.server,
                cfg.anchors.strategy,
                cfg.anchors.seed,
            )
        })
        .transpose()?;
    let device_anchors = any(SystemMode::Relative)
        .then(|| {
            select_anchors(
                &train,
                cfg.anchors.on_device,
                cfg.anchors.strategy,
                derive_seed(cfg.anchors.seed, TAG_DEVICE_ANCHORS),
            )
        })
        .transpose()?;
    let built = pool.install(|| build_systems(cfg, &train, device_anchors.as_ref()))?;
    let (cells, skipped) = grid(cfg, &built);

    let appender = Appender::create(&csv_path, cells.len(), &hash)?;
    let rows = run_cells(jobs, cells.len(), appender, |i| {
        let c = cells[i];
        let (enc, dec) = (&built[c.enc], &built[c.dec]);
        let snr_db = cfg.snr_db[c.snr];
        let truth = known_map(enc, dec);
        (0..cfg.trials)
            .map(|trial| {
                let ch = ChannelSpec::from_snr_db(
                    snr_db,
                    derive_seed(
                        derive_seed(cfg.seed, TAG_EVAL_CHANNEL + c.snr as u64),
                        trial as u64,
                    ),
                )?;
                let mut row = ResultRow::new("run", &hash);
                row.encoder_id = Some(enc.system.id.clone());
                row.decoder_id = Some(dec.system.id.clone());
                row.snr_db = Some(snr_db);
                row.sigma = Some(ch.sigma());
                row.trial = Some(trial);
                let map: Option<AlignmentMap> = match c.estimator {
                    None => {
                        row.estimator = Some("on-device".into());
                        row.n_tau = device_anchors.as_ref().map(AnchorSet::len);
                        None
                    }
                    Some(name) => {
                        row.estimator = Some(name.as_str().into());
                        match estimator_spec(cfg, name, derive_seed(cfg.seed, trial as u64)) {
                            None => None,
                            Some(spec) => {
                                let anchors = server_anchors.as_ref().expect("plain systems exist");
                                row.n_tau = Some(anchors.len());
                                Some(align_server_side(
                                    &enc.system,
                                    &dec.system,
                                    &anchors.samples,
                                    &ch,
                                    &spec,
                                    trial as u64,
                                )?)
                            }
                        }
                    }
                };
                if let (Some(t), Some(name)) = (&truth, c.estimator) {
                    let implied = match (&map, name) {
                        (_, EstimatorName::None) => Some(AlignmentMap::identity(t.dim())),
                        (Some(m), _) if m.matrix().is_some() => Some(m.clone()),
                        _ => None,
                    };
                    if let Some(m) = implied {
                        let err = alignment_error(&m, t)?;
                        row.alignment_error = Some(err.frobenius);
                        row.alignment_error_inf = Some(err.inf);
                    }
                }
                let predictions = cross_model_infer(
                    &enc.system,
                    &dec.system,
                    map.as_ref(),
                    &ch,
                    &test.features,
                    0,
                )?;
                row.accuracy = Some(top1_accuracy(&predictions, &test.labels)?);
                let lb = lower_bound_estimate(
                    &enc.system,
                    &dec.system,
                    map.as_ref(),
                    &test,
                    &ch,
                    cfg.lower_bound_draws,
                )?;
                row.lower_bound = Some(lb.mean);
                row.lower_bound_std_error = Some(lb.std_error);
                Ok(row)
            })
            .collect()
    })?;

    let seeds = json!({
        "root": cfg.seed,
        "task": cfg.task.seed,
        "anchors": cfg.anchors.seed,
        "systems": cfg.systems.iter().map(|s| (s.id.clone(), s.seed)).collect::<std::collections::BTreeMap<_, _>>(),
        "training_channel": format!("derive_seed(system seed, {TAG_TRAIN_CHANNEL})"),
        "on_device_anchors": format!("derive_seed(anchors.seed, {TAG_DEVICE_ANCHORS})"),
        "evaluation_channel": format!("derive_seed(derive_seed(root, {TAG_EVAL_CHANNEL} + snr index), trial)"),
        "estimator": "derive_seed(root, trial)",
        "anchor_streams": "derive_seed(trial, 1) for the encoder side, derive_seed(trial, 2) for the reference side",
    });
    let details = json!({
        "skipped_pairs": skipped,
        "cells": cells.len(),
        "training": built.iter().map(|b| json!({
            "id": b.system.id,
            "mode": b.system.mode,
            "final_loss": b.system.training_log.epoch_losses.last(),
            "derived_from": b.derived.as_ref().map(|(f, _)| f),
        })).collect::<Vec<_>>(),
    });
    publish_manifest(
        &manifest_path,
        "run",
        cfg,
        &hash,
        &csv_path,
        rows,
        seeds,
        details,
    )?;
    Ok(Outcome {
        csv: csv_path,
        manifest: manifest_path,
        rows,
        config_hash: hash,
    })
}

/// Times every configured operation for every `(d, n_tau)` shape on one
/// thread and writes `bench.csv` plus `bench.manifest.json`.
pub fn bench(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    let hash = cfg.hash();
    let (csv_path, manifest_path) = file_paths(out_dir, "bench");
    let b = &cfg.bench;
    let shapes: Vec<(usize, usize)> =
        b.d.iter()
            .flat_map(|&d| b.n_tau.iter().map(move |&n| (d, n)))
            .collect();
    let reps = vec![b.repetitions; b.operations.len()];
    let mut records: Vec<RuntimeRecord> = Vec::new();
    let mut appender = Appender::create(&csv_path, shapes.len(), &hash)?;
    for (i, &(d, n_tau)) in shapes.iter().enumerate() {
        let recs = benchmark_interleaved(&b.operations, &reps, d, n_tau, b.seed)?;
        let rows = recs
            .iter()
            .map(|r| ResultRow {
                operation: Some(r.operation.as_str().into()),
                d: Some(r.d),
                n_tau: Some(r.n_tau),
                repetitions: Some(r.repetitions),
                median_ms: Some(r.median_ms),
                p95_ms: Some(r.p95_ms),
                mean_ms: Some(r.mean_ms),
                ..ResultRow::new("bench", &hash)
            })
            .collect();
        appender.submit(i, rows)?;
        records.extend(recs);
    }
    let rows = appender.finish()?;
    let environment = records.first().map(|r| r.environment.clone());
    publish_manifest(
        &manifest_path,
        "bench",
        cfg,
        &hash,
        &csv_path,
        rows,
        json!({ "bench": b.seed }),
        json!({ "environment": environment, "records": records }),
    )?;
    Ok(Outcome {
        csv: csv_path,
        manifest: manifest_path,
        rows,
        config_hash: hash,
    })
}

/// Reports whose slack falls below `-tolerance`.
pub fn bound_violations(reports: &[BoundReport], tolerance: f64) -> Vec<&BoundReport> {
    reports.iter().filter(|r| !r.holds(tolerance)).collect()
}

/// Checks the Lipschitz gap bound on freshly trained systems and their
/// orthogonally transformed twins across the bound SNR grid. Writes
/// `bounds.csv` plus `bounds.manifest.json` and fails with exit code 3 if
/// any report violates the bound; the files are complete in either case.
pub fn check_bounds(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<Outcome, CliError> {
    let hash = cfg.hash();
    let (csv_path, manifest_path) = file_paths(out_dir, "bounds");
    let c = &cfg.bounds;
    let mut channels: Vec<Option<f64>> = c.snr_db.iter().copied().map(Some).collect();
    if c.include_noiseless {
        channels.push(None);
    }
    let template = cfg
        .systems
        .iter()
        .find(|s| s.mode == SystemMode::Plain && s.derive.is_none())
        .cloned()
        .unwrap_or_else(|| SystemConfig::plain("s1", 0));

    let reports = std::sync::Mutex::new(vec![Vec::new(); c.trials]);
    let appender = Appender::create(&csv_path, c.trials, &hash)?;
    let rows = run_cells(jobs, c.trials, appender, |trial| {
        let t = trial as u64;
        let mut spec = cfg.task.to_spec();
        spec.samples_per_class = c.samples_per_class;
        spec.seed = derive_seed(cfg.task.seed, TAG_BOUND_TASK + t);
        let data = generate_task(&spec)?;
        let test = data.split(Split::Test);
        if test.is_empty() {
            return Err(CliError::Validation(vec![
                "bounds: task.test_fraction leaves no test samples".into(),
            ]));
        }
        let seed = derive_seed(template.seed, t);
        let mut tc = train_config(cfg, seed)?;
        tc.epochs = c.epochs;
        let arch = architecture(&template, &data);
        let mut s1 = train_baseline(
            &TocSystem::plain("s1", &arch, seed)?,
            &data.split(Split::Train),
            &tc,
        )?;
        s1.decoder.net.clip_spectral_norm(c.decoder_spectral_clip);
        let truth = make_ground_truth_transform(
            arch.feature_dim,
            TransformKind::Orthogonal,
            1.0,
            derive_seed(cfg.seed, TAG_BOUND_TRANSFORM + t),
        )?;
        let s2 = transformed_system(&s1, &truth.matrix, "s2")?;
        let mut out_rows = Vec::with_capacity(channels.len());
        let mut out_reports = Vec::with_capacity(channels.len());
        for (k, snr) in channels.iter().enumerate() {
            let ch_seed = derive_seed(derive_seed(cfg.seed, TAG_BOUND_CHANNEL + k as u64), t);
            let ch = match snr {
                Some(s) => ChannelSpec::from_snr_db(*s, ch_seed)?,
                None => ChannelSpec::noiseless().with_seed(ch_seed),
            };
            let r = check_prop1_bound(&s1, &s2, &truth, &ch, &test, c.draws)?;
            out_rows.push(ResultRow {
                encoder_id: Some(r.encoder_id.clone()),
                decoder_id: Some(r.decoder_id.clone()),
                snr_db: r.snr_db,
                sigma: Some(r.sigma),
                trial: Some(trial),
                d: Some(r.d),
                measured_gap: Some(r.measured_gap),
                gap_std_error: Some(r.gap_std_error),
                rho: Some(r.rho),
                rho_empirical: Some(r.rho_empirical),
                m_minus_i_inf: Some(r.m_minus_i_inf),
                rhs: Some(r.rhs),
                rhs_rho_free: Some(r.rhs_rho_free),
                slack: Some(r.slack),
                slack_rho_free: Some(r.slack_rho_free),
                ..ResultRow::new("bound", &hash)
            });
            out_reports.push(r);
        }
        reports
            .lock()
            .expect("no job panics while holding the lock")[trial] = out_reports;
        Ok(out_rows)
    })?;

    let reports: Vec<BoundReport> = reports
        .into_inner()
        .expect("no job panicked")
        .into_iter()
        .flatten()
        .collect();
    let violations = bound_violations(&reports, c.tolerance);
    let worst = reports
        .iter()
        .map(|r| r.slack)
        .fold(f64::INFINITY, f64::min);
    publish_manifest(
        &manifest_path,
        "check-bounds",
        cfg,
        &hash,
        &csv_path,
        rows,
        json!({
            "root": cfg.seed,
            "task": format!("derive_seed(task.seed, {TAG_BOUND_TASK} + trial)"),
            "system": format!("derive_seed({}, trial)", template.seed),
            "transform": format!("derive_seed(root, {TAG_BOUND_TRANSFORM} + trial)"),
            "channel": format!("derive_seed(derive_seed(root, {TAG_BOUND_CHANNEL} + snr index), trial)"),
        }),
        json!({
            "tolerance": c.tolerance,
            "min_slack": worst,
            "violations": violations.len(),
            "reports": reports,
        }),
    )?;
    if !violations.is_empty() {
        return Err(CliError::BoundViolation(format!(
            "{} of {} bound reports have slack below -{:e} (worst {worst:e}); see {}",
            violations.len(),
            reports.len(),
            c.tolerance,
            manifest_path.display()
        )));
    }
    Ok(Outcome {
        csv: csv_path,
        manifest: manifest_path,
        rows,
        config_hash: hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(slack: f64) -> BoundReport {
        BoundReport {
            encoder_id: "a".into(),
            decoder_id: "b".into(),
            snr_db: Some(6.0),
            sigma: 0.5,
            d: 4,
            samples: 1,
            draws: 1,
            channel_seed: 0,
            measured_gap: 1.0 - slack,
            gap_std_error: 0.0,
            rho: 1.0,
            rho_empirical: 1.0,
            m_minus_i_inf: 1.0,
            rhs: 1.0,
            rhs_rho_free: 1.0,
            slack,
            slack_rho_free: slack,
        }
    }

    #[test]
    fn violations_respect_tolerance() {
        let rs = [report(0.5), report(-1e-12), report(-1e-3)];
        assert_eq!(bound_violations(&rs, 1e-9).len(), 1);
        assert_eq!(bound_violations(&rs, 0.0).len(), 2);
    }

    #[test]
    fn grid_counts_cells_and_skips_mixed_modes() {
        let mut cfg = ExperimentConfig::default();
        cfg.snr_db = vec![6.0, 18.0];
        let data = generate_task(&toc_align::TaskSpec::new(3, 4, 10, 4.0, 0)).unwrap();
        let arch = Architecture::new(4, 3);
        let anchors = data.features.select_columns(&[0, 1, 2]);
        let sys = |id: &str, mode| Built {
            system: match mode {
                Mode::Plain => TocSystem::plain(id, &arch, 0).unwrap(),
                Mode::Relative => TocSystem::relative(id, &arch, anchors.clone(), 0).unwrap(),
            },
            derived: None,
        };
        let built = vec![
            sys("p1", Mode::Plain),
            sys("p2", Mode::Plain),
            sys("r1", Mode::Relative),
        ];
        let (cells, skipped) = grid(&cfg, &built);
        assert_eq!(cells.len(), 2 * 2 * 5 * 2 + 2);
        assert_eq!(skipped.len(), 4);
    }

    #[test]
    fn known_maps_follow_derivation() {
        let arch = Architecture::new(4, 3);
        let base = TocSystem::plain("a", &arch, 0).unwrap();
        let t = make_ground_truth_transform(16, TransformKind::OrthogonalScaled, 1.0, 3).unwrap();
        let c = t.matrix.column(0).norm();
        let q = &t.matrix / c;
        let a = Built {
            system: base.clone(),
            derived: None,
        };
        let b = Built {
            system: transformed_system(&base, &t.matrix, "b").unwrap(),
            derived: Some(("a".into(), q.clone())),
        };
        let other = Built {
            system: TocSystem::plain("o", &arch, 1).unwrap(),
            derived: None,
        };
        assert_eq!(known_map(&a, &b).unwrap().matrix, q);
        assert_eq!(known_map(&b, &a).unwrap().matrix, q.transpose());
        assert_eq!(known_map(&a, &a).unwrap().matrix, DMatrix::identity(16, 16));
        assert!(known_map(&a, &other).is_none());
        assert!((&q * q.transpose() - DMatrix::identity(16, 16)).amax() < 1e-12);
    }
}
