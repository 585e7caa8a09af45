//! Run configuration.
//!
//! A run is described by a TOML file with one table per component. Any key
//! can be overridden from the command line as `section.key=value`; the
//! override is applied to the parsed table before it is deserialized, so
//! files and flags share one set of names and one set of error messages.

use std::path::{Path, PathBuf};

use ndc_core::classifier::{ClassifierTrainConfig, ProbeConfig, Supervision, TrainMode};
use ndc_core::detector::{DetectorArch, DetectorTrainConfig, DEFAULT_MU, DEFAULT_TAU};
use ndc_core::encoder::{EncoderKind, PretrainConfig, DEFAULT_FEATURE_DIM};
use ndc_core::eval::DEFAULT_RADIUS;
use ndc_core::joint::JointTrainConfig;
use ndc_core::synth::{SceneSpec, Style};
use ndc_core::training::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; must not exist yet, or be empty.
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub detector: DetectorSection,
    pub encoder: EncoderSection,
    pub classifier: ClassifierSection,
    pub probe: ScheduleSection,
    pub joint: JointSection,
    pub ablation: AblationSection,
    pub checkpoints: CheckpointSection,
}


/// Dataset directories written by `gen-data` or in the same layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Further training sets combined with `train` by detector and joint
    /// training.
    pub extra_train: Vec<PathBuf>,
}

/// Synthetic scenes. The preset picks the style; the optional fields
/// override single style values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub preset: String,
    pub height: usize,
    pub width: usize,
    pub mean_count: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_separation: f64,
    /// Number of classes, drawn uniformly.
    pub classes: usize,
    pub class_cue: Option<f64>,
    pub hue_jitter: Option<f64>,
    pub noise_std: Option<f64>,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            preset: "alpha".into(),
            height: s.height,
            width: s.width,
            mean_count: s.mean_count,
            radius_min: s.radius_min,
            radius_max: s.radius_max,
            min_separation: s.min_separation,
            classes: s.classes(),
            class_cue: None,
            hue_jitter: None,
            noise_std: None,
            train_images: 200,
            test_images: 50,
        }
    }
}

impl SynthSection {
    /// Scene spec for a style preset; `None` uses `self.preset`.
    pub fn scene(&self, preset: Option<&str>) -> Result<SceneSpec> {
        let name = preset.unwrap_or(&self.preset);
        let mut style = Style::preset(name)
            .ok_or_else(|| CliError::config("synth.preset", format!("unknown style preset `{name}`")))?;
        if let Some(v) = self.class_cue {
            style.class_cue = v;
        }
        if let Some(v) = self.hue_jitter {
            style.hue_jitter = v;
        }
        if let Some(v) = self.noise_std {
            style.noise_std = v;
        }
        if self.classes == 0 {
            return Err(CliError::config("synth.classes", "must be positive"));
        }
        let spec = SceneSpec {
            height: self.height,
            width: self.width,
            mean_count: self.mean_count,
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            min_separation: self.min_separation,
            class_prior: vec![1.0 / self.classes as f64; self.classes],
            style,
        };
        spec.validate().map_err(|e| CliError::config("synth", e.to_string()))?;
        Ok(spec)
    }
}

/// Epochs, batch size and SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl ScheduleSection {
    fn classifier() -> Self {
        ClassifierTrainConfig::default().schedule.into()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self::classifier()
    }
}

impl From<Schedule> for ScheduleSection {
    fn from(s: Schedule) -> Self {
        Self {
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// Channel multiplier of the detector backbone.
    pub width: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Score weight in the assignment cost.
    pub mu: f64,
    pub lambda_reg: f64,
    pub tau: f64,
    /// Matching radius of every F1 computation in the run.
    pub radius: f64,
    pub suppress_duplicates: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorTrainConfig::default();
        let a = DetectorArch::default();
        Self {
            width: a.width,
            stride: a.stride,
            epochs: d.schedule.epochs,
            batch_size: d.schedule.batch_size,
            lr: d.schedule.lr,
            momentum: d.schedule.momentum,
            mu: DEFAULT_MU,
            lambda_reg: d.lambda_reg,
            tau: DEFAULT_TAU,
            radius: DEFAULT_RADIUS,
            suppress_duplicates: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    /// `pretext-pretrained` or `random-frozen`; ignored when
    /// `checkpoints.encoder` is set.
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub stride: usize,
    pub crop: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            kind: EncoderKind::PretextPretrained,
            feature_dim: DEFAULT_FEATURE_DIM,
            stride: p.stride,
            crop: p.crop,
            epochs: p.schedule.epochs,
            batch_size: p.schedule.batch_size,
            lr: p.schedule.lr,
            momentum: p.schedule.momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub mode: TrainMode,
    pub supervision: Supervision,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierTrainConfig::default();
        Self {
            mode: c.mode,
            supervision: c.supervision,
            epochs: c.schedule.epochs,
            batch_size: c.schedule.batch_size,
            lr: c.schedule.lr,
            momentum: c.schedule.momentum,
        }
    }
}

/// Backbone initialization of the joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointInit {
    #[default]
    Random,
    /// From the encoder of the run (checkpoint or pretext pretraining).
    Pretrained,
}

/// Joint model training; `mu`, `lambda_reg`, `tau` and `radius` come from
/// the detector section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSection {
    pub init: JointInit,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_cls: f64,
    /// Linear probe of the backbone after every epoch.
    pub probe: bool,
}

impl Default for JointSection {
    fn default() -> Self {
        let j = JointTrainConfig::default();
        Self {
            init: JointInit::Random,
            epochs: j.schedule.epochs,
            batch_size: j.schedule.batch_size,
            lr: j.schedule.lr,
            momentum: j.schedule.momentum,
            lambda_cls: j.lambda_cls,
            probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Runs use seeds `seed, seed + 1, ...`; tables report medians.
    pub seeds: usize,
    pub widths: Vec<usize>,
    pub small_images: usize,
    pub small_preset: String,
    pub large_images: usize,
    pub large_preset: String,
    /// Convergence is the first epoch reaching this fraction of the final value.
    pub fraction: f64,
    pub dynamics_init: JointInit,
    pub probe_init: JointInit,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: 3,
            widths: vec![1, 4],
            small_images: 20,
            small_preset: "alpha".into(),
            large_images: 200,
            large_preset: "beta".into(),
            fraction: 0.95,
            dynamics_init: JointInit::Random,
            probe_init: JointInit::Pretrained,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSection {
    pub detector: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub joint: Option<PathBuf>,
}

fn check_schedule(key: &str, s: Schedule) -> Result<()> {
    s.validate().map_err(|e| CliError::config(key, e.to_string()))
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(key, format!("{v} must be finite and > 0")))
    }
}

impl RunConfig {
    /// Checks every value that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.synth.scene(None)?;
        let d = &self.detector;
        if d.width == 0 {
            return Err(CliError::config("detector.width", "must be positive"));
        }
        if d.stride != 4 {
            return Err(CliError::config("detector.stride", "only stride 4 backbones are available"));
        }
        check_schedule("detector", self.detector_config(0).schedule)?;
        if !(d.tau > 0.0 && d.tau < 1.0) {
            return Err(CliError::config("detector.tau", format!("{} outside (0, 1)", d.tau)));
        }
        check_positive("detector.radius", d.radius)?;
        if !(d.mu >= 0.0 && d.lambda_reg >= 0.0) {
            return Err(CliError::config("detector", "mu and lambda_reg must be >= 0"));
        }
        let e = &self.encoder;
        if e.kind == EncoderKind::Trainable {
            return Err(CliError::config(
                "encoder.kind",
                "trainable encoders come from full-mode training; load them with checkpoints.encoder",
            ));
        }
        if e.feature_dim == 0 || e.crop == 0 {
            return Err(CliError::config("encoder", "feature_dim and crop must be positive"));
        }
        if e.stride != 4 {
            return Err(CliError::config("encoder.stride", "only stride 4 encoders are available"));
        }
        check_schedule("encoder", self.pretrain_config(0).schedule)?;
        check_schedule("classifier", self.classifier_config(0).schedule)?;
        check_schedule("probe", self.probe.schedule())?;
        check_schedule("joint", self.joint_config(0).schedule)?;
        if !(self.joint.lambda_cls >= 0.0 && self.joint.lambda_cls.is_finite()) {
            return Err(CliError::config("joint.lambda_cls", "must be finite and >= 0"));
        }
        let a = &self.ablation;
        if a.seeds == 0 {
            return Err(CliError::config("ablation.seeds", "must be positive"));
        }
        if a.widths.is_empty() || a.widths.contains(&0) {
            return Err(CliError::config("ablation.widths", "needs at least one positive width"));
        }
        if a.small_images == 0 || a.large_images == 0 {
            return Err(CliError::config("ablation", "small_images and large_images must be positive"));
        }
        self.synth.scene(Some(&a.small_preset))?;
        self.synth.scene(Some(&a.large_preset))?;
        if !(a.fraction > 0.0 && a.fraction <= 1.0) {
            return Err(CliError::config("ablation.fraction", format!("{} outside (0, 1]", a.fraction)));
        }
        Ok(())
    }

    pub fn arch(&self, width: usize) -> DetectorArch {
        DetectorArch {
            width,
            stride: self.detector.stride,
        }
    }

    pub fn detector_config(&self, seed: u64) -> DetectorTrainConfig {
        let d = &self.detector;
        DetectorTrainConfig {
            schedule: Schedule {
                epochs: d.epochs,
                batch_size: d.batch_size,
                lr: d.lr,
                momentum: d.momentum,
            },
            mu: d.mu,
            lambda_reg: d.lambda_reg,
            tau: d.tau,
            radius: d.radius,
            seed,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        let e = &self.encoder;
        PretrainConfig {
            schedule: Schedule {
                epochs: e.epochs,
                batch_size: e.batch_size,
                lr: e.lr,
                momentum: e.momentum,
            },
            crop: e.crop,
            feature_dim: e.feature_dim,
            stride: e.stride,
            seed,
        }
    }

    pub fn classifier_config(&self, seed: u64) -> ClassifierTrainConfig {
        let c = &self.classifier;
        ClassifierTrainConfig {
            schedule: Schedule {
                epochs: c.epochs,
                batch_size: c.batch_size,
                lr: c.lr,
                momentum: c.momentum,
            },
            mode: c.mode,
            supervision: c.supervision,
            tau: self.detector.tau,
            radius: self.detector.radius,
            seed,
        }
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            schedule: self.probe.schedule(),
            seed,
        }
    }

    pub fn joint_config(&self, seed: u64) -> JointTrainConfig {
        let j = &self.joint;
        JointTrainConfig {
            schedule: Schedule {
                epochs: j.epochs,
                batch_size: j.batch_size,
                lr: j.lr,
                momentum: j.momentum,
            },
            mu: self.detector.mu,
            lambda_reg: self.detector.lambda_reg,
            lambda_cls: j.lambda_cls,
            tau: self.detector.tau,
            radius: self.detector.radius,
            seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Parses one `key=value` override into `table`. The value is read as a
/// TOML value when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = key.split('.').collect();
    let (last, parents) = segments.split_last().expect("non-empty key");
    let mut node = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = node
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::config(segments[..=i].join("."), "is not a section")),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Deserializes a table, reporting failures with the offending key path.
pub fn from_table(table: toml::Table) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| CliError::config(e.path().to_string(), e.inner().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any), applies the overrides in order and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::config(p.display().to_string(), e.to_string().trim_end().to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}
