use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adapt::{AdaptationPolicy, CollectionConfig};
use crate::model::{ModelConfig, TrainConfig};
use crate::numerics::AdamHyper;
use crate::sim::{CsiShape, FeatureExtractor, ShiftPreset};

/// Prefix of environment variables that override config keys. `__`
/// separates path segments: `CSILOOP_MODEL__EPOCHS=4` sets `model.epochs`.
pub const ENV_PREFIX: &str = "CSILOOP_";

/// A config problem tied to the dotted key that caused it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub rate_hz: f64,
    pub shape: CsiShape,
    /// Seconds per activity segment in training and test recordings.
    pub segment_s: f64,
    /// Training recordings; the first uses the reference profile as is,
    /// the others perturb SNR, phase, taps and add a stray reflector.
    pub train_sessions: usize,
    /// Rounds of all eight activities per training session.
    pub session_rounds: usize,
    pub test_rounds: usize,
    pub window: usize,
    pub session_snr_min_db: f64,
    pub session_snr_max_db: f64,
    pub session_gain_perturbation: f64,
    pub session_tap_jitter: f64,
    pub session_reflector_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            rate_hz: 100.0,
            shape: CsiShape::default(),
            segment_s: 12.8,
            train_sessions: 8,
            session_rounds: 4,
            test_rounds: 4,
            window: 128,
            session_snr_min_db: -7.0,
            session_snr_max_db: 6.0,
            session_gain_perturbation: 0.15,
            session_tap_jitter: 1.0,
            session_reflector_gain: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            layers: 3,
            epochs: 16,
            learning_rate: 1e-3,
            batch_size: 32,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// A cycle starts when the shift is applied.
    ShiftOnset,
    /// A cycle starts only when the confidence monitor fires.
    Confidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub activation: Activation,
    /// Length of the shifted stream the monitor watches, simulated seconds.
    pub monitor_s: f64,
    /// Frames between successive monitored predictions.
    pub monitor_stride: usize,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 8,
            activation: Activation::ShiftOnset,
            monitor_s: 120.0,
            monitor_stride: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    Oracle,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    /// Oracle precision p.
    pub precision: f64,
    pub rate_hz: f64,
    pub attention_scenes_per_class: usize,
    pub attention_epochs: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Oracle,
            precision: 1.0,
            rate_hz: 30.0,
            attention_scenes_per_class: 40,
            attention_epochs: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    Memory,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub transport: TransportKind,
    /// TCP port of the training node; 0 picks a free one.
    pub port: u16,
    pub nodes: u32,
    pub ack_timeout_ms: u64,
    pub retries: u32,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            transport: TransportKind::Memory,
            port: 0,
            nodes: 1,
            ack_timeout_ms: 5000,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub shift: ShiftPreset,
    /// Oracle precisions for the sweep experiment.
    pub sweep_precisions: Vec<f64>,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub adaptation: AdaptationSection,
    pub policy: AdaptationPolicy,
    pub teacher: TeacherSection,
    pub collection: CollectionConfig,
    pub net: NetSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("csiloop-out"),
            shift: ShiftPreset::Severe,
            sweep_precisions: vec![0.5, 0.7, 0.9, 1.0],
            generator: GeneratorConfig::default(),
            model: ModelSection::default(),
            adaptation: AdaptationSection::default(),
            policy: AdaptationPolicy::default(),
            teacher: TeacherSection::default(),
            collection: CollectionConfig::default(),
            net: NetSection::default(),
        }
    }
}

fn at<T>(path: &str, r: crate::Result<T>) -> Result<T, ConfigError> {
    r.map_err(|e| ConfigError::new(path, e))
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("{v} must be positive")))
    }
}

fn nonzero(path: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(ConfigError::new(path, "must be at least 1"))
    }
}

impl ExperimentConfig {
    /// Defaults, then `file` (if any), then `CSILOOP_*` variables from
    /// `env`, then `KEY=VALUE` strings from `sets`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self, ConfigError> {
        let mut table = Table::try_from(Self::default())
            .map_err(|e| ConfigError::new("", format!("default config: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
            let user: Table = text
                .parse()
                .map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
            merge(&mut table, user, "")?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        env.sort();
        for (key, raw) in env {
            set_path(&mut table, &key, &raw)?;
        }
        Self::finish(table, sets)
    }

    /// This config with `KEY=VALUE` strings applied on top.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self, ConfigError> {
        let table =
            Table::try_from(self.clone()).map_err(|e| ConfigError::new("", e.to_string()))?;
        Self::finish(table, sets)
    }

    fn finish(mut table: Table, sets: &[String]) -> Result<Self, ConfigError> {
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::new(s.as_str(), "expected KEY=VALUE"))?;
            set_path(&mut table, key.trim(), raw.trim())?;
        }
        let cfg: Self = serde_path_to_error::deserialize(Value::Table(table))
            .map_err(|e| ConfigError::new(e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn feature_dim(&self) -> usize {
        FeatureExtractor::new(self.generator.shape).map_or(0, |f| f.dim())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.feature_dim(),
            hidden_dim: self.model.hidden_dim,
            layers: self.model.layers,
            classes: crate::sim::ActivityClass::COUNT,
        }
    }

    pub fn baseline_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamHyper::with_learning_rate(self.model.learning_rate),
            epochs: self.model.epochs,
            batch_size: self.model.batch_size,
            seed,
            clip_norm: (self.model.clip_norm > 0.0).then_some(self.model.clip_norm),
        }
    }

    pub fn adaptation_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            adam: AdamHyper::with_learning_rate(self.adaptation.learning_rate),
            epochs: self.adaptation.epochs,
            batch_size: self.adaptation.batch_size,
            ..TrainConfig::adaptation(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        let g = &self.generator;
        positive("generator.rate_hz", g.rate_hz)?;
        at("generator.shape", g.shape.validate())?;
        positive("generator.segment_s", g.segment_s)?;
        nonzero("generator.train_sessions", g.train_sessions)?;
        nonzero("generator.session_rounds", g.session_rounds)?;
        nonzero("generator.test_rounds", g.test_rounds)?;
        nonzero("generator.window", g.window)?;
        if g.window as f64 > g.segment_s * g.rate_hz {
            return Err(ConfigError::new(
                "generator.window",
                "window is longer than one activity segment",
            ));
        }
        if !(g.session_snr_min_db <= g.session_snr_max_db) {
            return Err(ConfigError::new(
                "generator.session_snr_max_db",
                "must not be below session_snr_min_db",
            ));
        }
        for (k, v) in [
            (
                "generator.session_gain_perturbation",
                g.session_gain_perturbation,
            ),
            ("generator.session_tap_jitter", g.session_tap_jitter),
            ("generator.session_reflector_gain", g.session_reflector_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::new(k, format!("{v} must be >= 0")));
            }
        }
        at("model", self.model_config().validate())?;
        at("model", self.baseline_train_config(0).validate())?;
        at("adaptation", self.adaptation_train_config(0).validate())?;
        positive("adaptation.monitor_s", self.adaptation.monitor_s)?;
        nonzero("adaptation.monitor_stride", self.adaptation.monitor_stride)?;
        at("policy", self.policy.validate())?;
        let t = &self.teacher;
        if !(0.0..=1.0).contains(&t.precision) {
            return Err(ConfigError::new(
                "teacher.precision",
                format!("{} outside [0, 1]", t.precision),
            ));
        }
        positive("teacher.rate_hz", t.rate_hz)?;
        nonzero(
            "teacher.attention_scenes_per_class",
            t.attention_scenes_per_class,
        )?;
        nonzero("teacher.attention_epochs", t.attention_epochs)?;
        for (i, p) in self.sweep_precisions.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(ConfigError::new(
                    format!("sweep_precisions[{i}]"),
                    format!("{p} outside [0, 1]"),
                ));
            }
        }
        at("collection", self.collection.validate())?;
        if self.collection.shape != g.shape {
            return Err(ConfigError::new(
                "collection.shape",
                "must equal generator.shape",
            ));
        }
        if self.collection.csi_rate_hz != g.rate_hz {
            return Err(ConfigError::new(
                "collection.csi_rate_hz",
                "must equal generator.rate_hz",
            ));
        }
        if self.collection.dataset.window != g.window {
            return Err(ConfigError::new(
                "collection.dataset.window",
                "must equal generator.window",
            ));
        }
        nonzero("net.nodes", self.net.nodes as usize)?;
        if self.net.ack_timeout_ms == 0 {
            return Err(ConfigError::new("net.ack_timeout_ms", "must be positive"));
        }
        Ok(())
    }
}

/// Overlays `user` onto `base`, refusing keys that `base` lacks.
fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(ConfigError::new(path, "unknown key")),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return Err(ConfigError::new(key, "empty key"));
    };
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(ConfigError::new(key, "unknown key")),
        };
    }
    match cur.get_mut(last) {
        Some(slot) => {
            let mut v = parse_value(raw);
            // integers given for float keys
            if let (Value::Float(_), Value::Integer(i)) = (&*slot, &v) {
                v = Value::Float(*i as f64);
            }
            *slot = v;
            Ok(())
        }
        None => Err(ConfigError::new(key, "unknown key")),
    }
}
