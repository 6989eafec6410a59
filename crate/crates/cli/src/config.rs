//! Experiment configuration: typed form, defaults, validation, overrides
//! and hashing.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use schemars::{json_schema, JsonSchema, Schema, SchemaGenerator};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use toc_align::estimators::GdInit;
use toc_align::eval::{BenchOperation, MIN_REPETITIONS};
use toc_align::features::{AnchorStrategy, TaskSpec, TransformKind};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the output directory when neither the flag
/// nor the config sets one.
pub const OUTPUT_DIR_ENV: &str = "TOC_ALIGN_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "results";

/// Full experiment description. Every field has a default, so `{}` is the
/// desk-scale reference experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root of every channel and trial seed.
    pub seed: u64,
    pub task: TaskConfig,
    pub systems: Vec<SystemConfig>,
    pub training: TrainingConfig,
    /// Evaluation SNR grid in dB.
    pub snr_db: Vec<f64>,
    pub estimators: Vec<EstimatorName>,
    pub anchors: AnchorConfig,
    pub gd: LearnedConfig,
    pub ft: FtConfig,
    pub trials: usize,
    /// Channel realizations averaged in each lower-bound estimate.
    pub lower_bound_draws: usize,
    /// Overrides the output directory environment variable.
    pub output_dir: Option<String>,
    pub bench: BenchConfig,
    pub bounds: BoundsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            task: TaskConfig::default(),
            systems: vec![SystemConfig::plain("s1", 1), SystemConfig::plain("s2", 2)],
            training: TrainingConfig::default(),
            snr_db: vec![6.0, 18.0],
            estimators: EstimatorName::ALL.to_vec(),
            anchors: AnchorConfig::default(),
            gd: LearnedConfig::default(),
            ft: FtConfig::default(),
            trials: 1,
            lower_bound_draws: 1,
            output_dir: None,
            bench: BenchConfig::default(),
            bounds: BoundsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub samples_per_class: usize,
    pub cluster_separation: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_classes: 10,
            latent_dim: 16,
            samples_per_class: 500,
            cluster_separation: 4.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn to_spec(&self) -> TaskSpec {
        TaskSpec {
            test_fraction: self.test_fraction,
            ..TaskSpec::new(
                self.num_classes,
                self.latent_dim,
                self.samples_per_class,
                self.cluster_separation,
                self.seed,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SystemMode {
    Plain,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub id: String,
    #[serde(default = "plain_mode")]
    pub mode: SystemMode,
    #[serde(default = "default_hidden")]
    pub encoder_hidden: usize,
    #[serde(default = "default_hidden")]
    pub decoder_hidden: usize,
    /// Transmitted feature dimension `d` of plain systems.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Builds this system from another one through a known transform
    /// instead of training it, which makes the true alignment map known.
    #[serde(default)]
    pub derive: Option<DeriveConfig>,
}

fn plain_mode() -> SystemMode {
    SystemMode::Plain
}
fn default_hidden() -> usize {
    toc_align::models::DEFAULT_ENCODER_HIDDEN
}
fn default_feature_dim() -> usize {
    toc_align::models::DEFAULT_FEATURE_DIM
}

impl SystemConfig {
    pub fn plain(id: &str, seed: u64) -> Self {
        SystemConfig {
            id: id.into(),
            mode: SystemMode::Plain,
            encoder_hidden: default_hidden(),
            decoder_hidden: default_hidden(),
            feature_dim: default_feature_dim(),
            seed,
            derive: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DeriveConfig {
    pub from: String,
    pub transform: DeriveTransform,
    #[serde(default)]
    pub seed: u64,
}

/// Angle-preserving transforms only: power normalization commutes with
/// them, so the derived system is exactly equivalent to its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum DeriveTransform {
    Orthogonal,
    OrthogonalScaled,
}

impl DeriveTransform {
    pub fn kind(self) -> TransformKind {
        match self {
            DeriveTransform::Orthogonal => TransformKind::Orthogonal,
            DeriveTransform::OrthogonalScaled => TransformKind::OrthogonalScaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_samples: usize,
    /// Channel SNR during training; `null` trains without a channel.
    pub snr_db: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 3e-3,
            noise_samples: 1,
            snr_db: Some(18.0),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    None,
    Ls,
    Mmse,
    Gd,
    Ft,
}

impl EstimatorName {
    pub const ALL: [EstimatorName; 5] = [Self::None, Self::Ls, Self::Mmse, Self::Gd, Self::Ft];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ls => "ls",
            Self::Mmse => "mmse",
            Self::Gd => "gd",
            Self::Ft => "ft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Anchors used by the server-side estimators.
    pub server: usize,
    /// Anchors shared by relative-mode systems.
    pub on_device: usize,
    #[schemars(schema_with = "strategy_schema")]
    pub strategy: AnchorStrategy,
    pub seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            server: toc_align::features::SERVER_ANCHORS,
            on_device: toc_align::features::ON_DEVICE_ANCHORS,
            strategy: AnchorStrategy::ClassStratified,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LearnedConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[schemars(schema_with = "init_schema")]
    pub init: GdInit,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        LearnedConfig {
            learning_rate: 0.1,
            epochs: 2000,
            init: GdInit::Zeros,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FtConfig {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for FtConfig {
    fn default() -> Self {
        FtConfig {
            hidden_width: 32,
            learning_rate: 0.01,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    #[schemars(schema_with = "operations_schema")]
    pub operations: Vec<BenchOperation>,
    pub d: Vec<usize>,
    pub n_tau: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            operations: BenchOperation::ALL.to_vec(),
            d: vec![16],
            n_tau: vec![100],
            repetitions: MIN_REPETITIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub trials: usize,
    pub snr_db: Vec<f64>,
    /// Adds one noiseless row per trial.
    pub include_noiseless: bool,
    pub samples_per_class: usize,
    pub epochs: usize,
    /// Spectral-norm cap applied to every decoder layer before checking.
    pub decoder_spectral_clip: f64,
    pub draws: usize,
    pub tolerance: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            trials: 50,
            snr_db: vec![2.0, 6.0, 10.0, 14.0, 18.0],
            include_noiseless: false,
            samples_per_class: 60,
            epochs: 10,
            decoder_spectral_clip: 1.0,
            draws: 4,
            tolerance: 1e-9,
        }
    }
}

// Core enums carry no schema of their own.
fn strategy_schema(_: &mut SchemaGenerator) -> Schema {
    json_schema!({"type": "string", "enum": ["class-stratified", "uniform-random"]})
}

fn init_schema(_: &mut SchemaGenerator) -> Schema {
    json_schema!({"type": "string", "enum": ["zeros", "identity", "gaussian"]})
}

fn operations_schema(_: &mut SchemaGenerator) -> Schema {
    let names: Vec<&str> = BenchOperation::ALL.iter().map(|o| o.as_str()).collect();
    json_schema!({"type": "array", "items": {"type": "string", "enum": names}})
}

fn positive(v: &mut Vec<String>, name: &str, x: usize) {
    if x == 0 {
        v.push(format!("{name} must be positive"));
    }
}

fn positive_real(v: &mut Vec<String>, name: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        v.push(format!("{name} must be a positive finite number, got {x}"));
    }
}

fn finite_grid(v: &mut Vec<String>, name: &str, grid: &[f64]) {
    if grid.is_empty() {
        v.push(format!("{name} must not be empty"));
    }
    for (i, x) in grid.iter().enumerate() {
        if !x.is_finite() {
            v.push(format!("{name}[{i}] must be finite"));
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint; empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        v.extend(
            self.task
                .to_spec()
                .violations()
                .into_iter()
                .map(|m| format!("task: {m}")),
        );

        if self.systems.is_empty() {
            v.push("systems must not be empty".into());
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.systems.iter().enumerate() {
            if s.id.is_empty() {
                v.push(format!("systems[{i}].id must not be empty"));
            }
            if !seen.insert(s.id.as_str()) {
                v.push(format!("systems[{i}].id {:?} is not unique", s.id));
            }
            positive(
                &mut v,
                &format!("systems[{i}].encoder_hidden"),
                s.encoder_hidden,
            );
            positive(
                &mut v,
                &format!("systems[{i}].decoder_hidden"),
                s.decoder_hidden,
            );
            positive(&mut v, &format!("systems[{i}].feature_dim"), s.feature_dim);
            if let Some(der) = &s.derive {
                if s.mode != SystemMode::Plain {
                    v.push(format!("systems[{i}].derive needs a plain system"));
                }
                match self.systems.iter().find(|o| o.id == der.from) {
                    None => v.push(format!(
                        "systems[{i}].derive.from {:?} names no system",
                        der.from
                    )),
                    Some(src) if src.derive.is_some() || src.mode != SystemMode::Plain => {
                        v.push(format!(
                            "systems[{i}].derive.from {:?} must be a trained plain system",
                            der.from
                        ))
                    }
                    Some(_) => {}
                }
            }
        }

        let t = &self.training;
        positive(&mut v, "training.epochs", t.epochs);
        positive(&mut v, "training.batch_size", t.batch_size);
        positive(&mut v, "training.noise_samples", t.noise_samples);
        positive_real(&mut v, "training.learning_rate", t.learning_rate);
        if t.snr_db.is_some_and(|s| !s.is_finite()) {
            v.push("training.snr_db must be finite or null".into());
        }

        finite_grid(&mut v, "snr_db", &self.snr_db);
        if self.estimators.is_empty() {
            v.push("estimators must not be empty".into());
        }
        let unique: BTreeSet<_> = self.estimators.iter().collect();
        if unique.len() != self.estimators.len() {
            v.push("estimators must not repeat".into());
        }
        positive(&mut v, "trials", self.trials);
        positive(&mut v, "lower_bound_draws", self.lower_bound_draws);

        let a = &self.anchors;
        let pool = self.task.num_classes * self.task.samples_per_class;
        let has_plain = self.systems.iter().any(|s| s.mode == SystemMode::Plain);
        let has_relative = self.systems.iter().any(|s| s.mode == SystemMode::Relative);
        if has_plain {
            for s in self.systems.iter().filter(|s| s.mode == SystemMode::Plain) {
                if a.server < s.feature_dim {
                    v.push(format!(
                        "anchors.server = {} is below feature_dim {} of {:?}; LS needs n_tau >= d",
                        a.server, s.feature_dim, s.id
                    ));
                }
            }
        }
        if has_relative {
            positive(&mut v, "anchors.on_device", a.on_device);
        }
        for (name, n) in [
            ("anchors.server", a.server),
            ("anchors.on_device", a.on_device),
        ] {
            if n > pool {
                v.push(format!("{name} = {n} exceeds the {pool} task samples"));
            }
        }

        positive_real(&mut v, "gd.learning_rate", self.gd.learning_rate);
        positive(&mut v, "gd.epochs", self.gd.epochs);
        positive(&mut v, "ft.hidden_width", self.ft.hidden_width);
        positive_real(&mut v, "ft.learning_rate", self.ft.learning_rate);
        positive(&mut v, "ft.epochs", self.ft.epochs);

        let b = &self.bench;
        if b.operations.is_empty() {
            v.push("bench.operations must not be empty".into());
        }
        if b.d.is_empty() || b.n_tau.is_empty() {
            v.push("bench.d and bench.n_tau must not be empty".into());
        }
        for &d in &b.d {
            for &n in &b.n_tau {
                if d == 0 || n < d {
                    v.push(format!(
                        "bench shape d={d}, n_tau={n} needs 1 <= d <= n_tau"
                    ));
                }
            }
        }
        if b.repetitions < MIN_REPETITIONS {
            v.push(format!(
                "bench.repetitions must be >= {MIN_REPETITIONS}, got {}",
                b.repetitions
            ));
        }

        let c = &self.bounds;
        positive(&mut v, "bounds.trials", c.trials);
        positive(&mut v, "bounds.samples_per_class", c.samples_per_class);
        positive(&mut v, "bounds.epochs", c.epochs);
        positive(&mut v, "bounds.draws", c.draws);
        positive_real(
            &mut v,
            "bounds.decoder_spectral_clip",
            c.decoder_spectral_clip,
        );
        if !(c.tolerance >= 0.0 && c.tolerance.is_finite()) {
            v.push(format!(
                "bounds.tolerance must be >= 0, got {}",
                c.tolerance
            ));
        }
        if c.snr_db.is_empty() && !c.include_noiseless {
            v.push("bounds.snr_db must not be empty unless include_noiseless is set".into());
        }
        for (i, x) in c.snr_db.iter().enumerate() {
            if !x.is_finite() {
                v.push(format!("bounds.snr_db[{i}] must be finite"));
            }
        }
        v
    }

    /// Stable digest of everything that affects results. The output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut value {
            map.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&value).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Flag, then config, then environment, then `./results`.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return PathBuf::from(p);
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => PathBuf::from(FALLBACK_OUTPUT_DIR),
        }
    }
}

/// The published JSON Schema for [`ExperimentConfig`].
pub fn schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}

/// Sets `path` (dot separated; numeric segments index arrays) inside a JSON
/// document. `raw` is parsed as JSON and falls back to a plain string.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if path.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Validation(vec![format!(
            "override path {path:?} is malformed"
        )]));
    }
    let mut cur = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    CliError::Validation(vec![format!(
                        "override {path:?}: segment {seg:?} must index an array"
                    )])
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    CliError::Validation(vec![format!(
                        "override {path:?}: index {idx} out of range for length {len}"
                    )])
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::Validation(vec![format!(
                    "override {path:?}: {seg:?} is below a scalar"
                )]))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Overlays `patch` on `base`: objects merge key by key, anything else
/// replaces. Applied over the serialized defaults, this gives dotted
/// overrides a complete document to address.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Loads a config document, applies `KEY=VALUE` overrides, checks it
/// against the published schema and then against the semantic rules.
/// All violations found at a stage are reported together.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(vec![format!("cannot read config {}: {e}", p.display())])
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Validation(vec![format!("config {} is not JSON: {e}", p.display())])
            })?
        }
        None => Value::Object(Default::default()),
    };
    let mut effective = serde_json::to_value(ExperimentConfig::default()).expect("serializes");
    merge(&mut effective, doc);
    let mut doc = effective;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| {
            CliError::Validation(vec![format!("override {o:?} must look like KEY=VALUE")])
        })?;
        apply_override(&mut doc, k.trim(), v)?;
    }

    let schema = schema();
    let validator = jsonschema::validator_for(&schema).expect("published schema compiles");
    let structural: Vec<String> = validator
        .iter_errors(&doc)
        .map(|e| {
            let at = e.instance_path.to_string();
            if at.is_empty() {
                e.to_string()
            } else {
                format!("{at}: {e}")
            }
        })
        .collect();
    if !structural.is_empty() {
        return Err(CliError::Validation(structural));
    }

    let cfg: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    let v = cfg.violations();
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Validation(v))
    }
}
