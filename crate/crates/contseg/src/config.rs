//! Run configuration: a versioned, human-readable key tree that maps onto
//! [`RunSettings`], plus the bundled presets.
//!
//! Configs are strict: unknown keys, a wrong `schema_version`, or values the
//! components reject all fail before any compute starts. A run directory
//! stores its config verbatim, so every artifact is reproducible from the
//! file next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Protocol, SynthSpec};
use crate::engine::{RunSettings, TrainConfig};
use crate::loss::{KdConfig, LossConfig, LossToggles, LossWeights};
use crate::model::{HeadMode, ModelConfig, TaskInit};
use crate::{Error, Result};

/// Format version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Class-schedule shape and labeling protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Classes in the first step.
    pub base: usize,
    /// Classes added per later step.
    pub increment: usize,
    pub protocol: Protocol,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { base: 8, increment: 1, protocol: Protocol::Overlapped }
    }
}

/// Recognition-head growth strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub task_init: TaskInit,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { mode: HeadMode::PerTask, task_init: TaskInit::Random }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score the background sentinel inside the overall mean.
    pub include_background: bool,
    /// IoU threshold of the proposal-recall probe.
    pub ar_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { include_background: false, ar_iou: 0.5 }
    }
}

/// The full configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Must equal [`SCHEMA_VERSION`]; `0` (unset) is rejected with a hint.
    pub schema_version: u32,
    /// Where run artifacts go; flags may override.
    pub out_dir: Option<PathBuf>,
    /// Reuse a corpus directory instead of synthesizing in memory. The
    /// stored manifest must match `data`.
    pub corpus_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub kd: KdConfig,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    pub heads: HeadConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// A fresh config at the current schema version with all defaults.
    pub fn current() -> Self {
        RunConfig { schema_version: SCHEMA_VERSION, ..RunConfig::default() }
    }

    /// Flatten into the engine's settings bundle.
    pub fn settings(&self) -> RunSettings {
        RunSettings {
            data: self.data.clone(),
            base_classes: self.schedule.base,
            increment: self.schedule.increment,
            protocol: self.schedule.protocol,
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            kd: self.kd.clone(),
            toggles: self.toggles.clone(),
            weights: self.weights.clone(),
            head_mode: self.heads.mode,
            task_init: self.heads.task_init,
            include_background: self.eval.include_background,
            ar_iou: self.eval.ar_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (this build reads {SCHEMA_VERSION}); \
                 set `schema_version = {SCHEMA_VERSION}` at the top of the file",
                self.schema_version
            )));
        }
        self.settings().validate()
    }

    /// Switch to the naive-finetune baseline (supervised term only, single
    /// shared recognition head).
    pub fn make_finetune(&mut self) {
        self.toggles = LossToggles::finetune();
        self.heads.mode = HeadMode::SharedQuery;
    }
}

/// Parse and validate a config file. Syntax errors carry the file position;
/// unknown keys name the offending field.
pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write a config as TOML.
pub fn save(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("config serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &["toy-joint", "toy-4-1", "toy-4-2", "finetune-baseline"];

/// A ready-to-run configuration:
///
/// * `toy-joint` — all 8 classes in one step; the upper bound.
/// * `toy-4-1` — 4 base classes, then 1 per step (5 steps).
/// * `toy-4-2` — 4 base classes, then 2 per step (3 steps).
/// * `finetune-baseline` — `toy-4-1` with every distillation/auxiliary term
///   off and a single shared recognition head.
pub fn preset(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::current();
    match name {
        "toy-joint" => {
            cfg.schedule.base = 8;
        }
        "toy-4-1" => {
            cfg.schedule.base = 4;
            cfg.schedule.increment = 1;
        }
        "toy-4-2" => {
            cfg.schedule.base = 4;
            cfg.schedule.increment = 2;
        }
        "finetune-baseline" => {
            cfg.schedule.base = 4;
            cfg.schedule.increment = 1;
            cfg.make_finetune();
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}'; available: {}",
                PRESETS.join(", ")
            )));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
