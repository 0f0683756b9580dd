//! Flat `key = value` experiment documents.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use mgd_core::data::SyntheticSpec;
use mgd_core::distill::{MaskConfig, MaskMode, ProjectorSpec, Reduction};
use mgd_core::models::BackboneConfig;
use mgd_core::trainer::{DistillLoss, LogitKd, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    TrainTeacher,
    Distill,
    SelfDistill,
    SweepLambda,
    SweepAlpha,
    AblateProjector,
    AblateStage,
    AblateChannelMask,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::TrainTeacher,
        Task::Distill,
        Task::SelfDistill,
        Task::SweepLambda,
        Task::SweepAlpha,
        Task::AblateProjector,
        Task::AblateStage,
        Task::AblateChannelMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::TrainTeacher => "train_teacher",
            Task::Distill => "distill",
            Task::SelfDistill => "self_distill",
            Task::SweepLambda => "sweep_lambda",
            Task::SweepAlpha => "sweep_alpha",
            Task::AblateProjector => "ablate_projector",
            Task::AblateStage => "ablate_stage",
            Task::AblateChannelMask => "ablate_channel_mask",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Procedural blobs; `spec.per_class` sizes the train split.
    Synthetic { spec: SyntheticSpec, val_per_class: usize },
    /// IDX image/label file pairs (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { dir: PathBuf },
}

impl DatasetSource {
    /// `(channels, size, classes)` known before any file is read.
    pub fn geometry(&self) -> (usize, usize, usize) {
        match self {
            DatasetSource::Synthetic { spec, .. } => (spec.channels, spec.size, spec.classes),
            DatasetSource::Idx { .. } => (1, 28, 10),
            DatasetSource::Cifar10 { .. } => (3, 32, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub teacher_config: Option<String>,
    pub student_config: Option<String>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub train_subset: Option<usize>,
    pub val_subset: Option<usize>,
    pub alpha: f64,
    pub lambda: f64,
    pub mask_mode: MaskMode,
    pub beta: f64,
    /// `None` distills the last stage of the student.
    pub stages: Option<Vec<String>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub logit_kd: Option<LogitKd>,
    pub sweep_values: Vec<f64>,
    pub distill_loss: DistillLoss,
    pub projector: ProjectorSpec,
    pub reduction: Reduction,
    pub hflip: bool,
    /// Sweep members run at once; 1 runs them one after another.
    pub sweep_parallel: usize,
}

pub const KNOWN_KEYS: &[&str] = &[
    "task",
    "teacher_config",
    "student_config",
    "teacher_checkpoint",
    "dataset",
    "train_images",
    "train_labels",
    "val_images",
    "val_labels",
    "data_dir",
    "train_subset",
    "val_subset",
    "synthetic_classes",
    "synthetic_per_class",
    "synthetic_val_per_class",
    "synthetic_size",
    "synthetic_noise",
    "data_seed",
    "alpha",
    "lambda",
    "mask_mode",
    "beta",
    "stages",
    "epochs",
    "batch_size",
    "lr_init",
    "lr_decay_every",
    "lr_decay_factor",
    "momentum",
    "weight_decay",
    "seed",
    "out_dir",
    "logit_kd_temperature",
    "logit_kd_weight",
    "sweep_values",
    "distill_loss",
    "projector_depth",
    "projector_kernel",
    "reduction",
    "hflip",
    "sweep_parallel",
];

fn err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Raw entries with duplicate and unknown keys rejected.
fn entries(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(line, format!("line {}: expected `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(err(k, format!("line {}: unknown key", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(k, format!("line {}: key given twice", n + 1)));
        }
    }
    Ok(map)
}

struct Fields {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Fields {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| err(key, format!("cannot parse `{v}`"))))
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|v| self.base.join(v))
    }

    fn required_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| err(key, "required"))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(err(key, format!("`{v}` is not a boolean"))),
        }
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|v| {
            v.trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a document; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let f = Fields {
            map: entries(text)?,
            base: base.to_path_buf(),
        };
        let task_name = f.raw("task").ok_or_else(|| err("task", "required"))?;
        let task = Task::ALL
            .into_iter()
            .find(|t| t.as_str() == task_name)
            .ok_or_else(|| err("task", format!("unknown task `{task_name}`")))?;

        let dataset = match f.raw("dataset").ok_or_else(|| err("dataset", "required"))? {
            "synthetic" => {
                let mut spec = SyntheticSpec::new(
                    f.or("synthetic_classes", 10)?,
                    f.or("synthetic_per_class", 1000)?,
                    f.or("synthetic_size", 16)?,
                    f.or("data_seed", 0)?,
                );
                spec.noise = f.or("synthetic_noise", spec.noise)?;
                if spec.classes < 2 {
                    return Err(err("synthetic_classes", "need at least 2"));
                }
                if spec.size == 0 || spec.per_class == 0 {
                    return Err(err("synthetic_size", "size and per-class count must be positive"));
                }
                if !(spec.noise >= 0.0) {
                    return Err(err("synthetic_noise", "must be ≥ 0"));
                }
                DatasetSource::Synthetic {
                    spec,
                    val_per_class: f.or("synthetic_val_per_class", 200)?,
                }
            }
            "mnist" | "idx" => DatasetSource::Idx {
                train_images: f.required_path("train_images")?,
                train_labels: f.required_path("train_labels")?,
                val_images: f.required_path("val_images")?,
                val_labels: f.required_path("val_labels")?,
            },
            "cifar10" => DatasetSource::Cifar10 {
                dir: f.required_path("data_dir")?,
            },
            other => return Err(err("dataset", format!("unknown dataset `{other}` (synthetic, mnist, cifar10)"))),
        };

        let logit_kd = match (f.parse::<f64>("logit_kd_temperature")?, f.parse::<f64>("logit_kd_weight")?) {
            (None, None) => None,
            (Some(temperature), Some(weight)) => Some(LogitKd { temperature, weight }),
            (Some(_), None) => return Err(err("logit_kd_weight", "required with logit_kd_temperature")),
            (None, Some(_)) => return Err(err("logit_kd_temperature", "required with logit_kd_weight")),
        };
        let mask_mode = match f.raw("mask_mode").unwrap_or("spatial") {
            "spatial" => MaskMode::Spatial,
            "channel" => MaskMode::Channel,
            v => return Err(err("mask_mode", format!("`{v}` is not spatial or channel"))),
        };
        let distill_loss = match f.raw("distill_loss").unwrap_or("mgd") {
            "mgd" => DistillLoss::Mgd,
            "mimic" => DistillLoss::Mimic,
            v => return Err(err("distill_loss", format!("`{v}` is not mgd or mimic"))),
        };
        let reduction = match f.raw("reduction").unwrap_or("sum") {
            "sum" => Reduction::Sum,
            "batch_mean" => Reduction::BatchMean,
            "element_mean" => Reduction::ElementMean,
            v => return Err(err("reduction", format!("`{v}` is not sum, batch_mean or element_mean"))),
        };
        let sweep_values = f
            .list("sweep_values")
            .unwrap_or_default()
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| err("sweep_values", format!("cannot parse `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;

        let cfg = Self {
            task,
            teacher_config: f.raw("teacher_config").map(str::to_string),
            student_config: f.raw("student_config").map(str::to_string),
            teacher_checkpoint: f.path("teacher_checkpoint"),
            dataset,
            train_subset: f.parse("train_subset")?,
            val_subset: f.parse("val_subset")?,
            alpha: f.or("alpha", 7e-5)?,
            lambda: f.or("lambda", 0.5)?,
            mask_mode,
            beta: f.or("beta", 0.15)?,
            stages: f.list("stages"),
            epochs: f.or("epochs", 30)?,
            batch_size: f.or("batch_size", 128)?,
            lr_init: f.or("lr_init", 0.1)?,
            lr_decay_every: f.or("lr_decay_every", 12)?,
            lr_decay_factor: f.or("lr_decay_factor", 0.1)?,
            momentum: f.or("momentum", 0.9)?,
            weight_decay: f.or("weight_decay", 1e-4)?,
            seed: f.or("seed", 0)?,
            out_dir: f.required_path("out_dir")?,
            logit_kd,
            sweep_values,
            distill_loss,
            projector: ProjectorSpec {
                depth: f.or("projector_depth", 2)?,
                kernel: f.or("projector_kernel", 3)?,
            },
            reduction,
            hflip: f.flag("hflip", true)?,
            sweep_parallel: f.or("sweep_parallel", 1)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-task requirements and value ranges; runs before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let need = |key: &str, present: bool| if present { Ok(()) } else { Err(err(key, format!("required by task {}", self.task))) };
        match self.task {
            Task::TrainTeacher => need("teacher_config", self.teacher_config.is_some())?,
            Task::Distill => {
                need("teacher_config", self.teacher_config.is_some())?;
                need("student_config", self.student_config.is_some())?;
                need("teacher_checkpoint", self.teacher_checkpoint.is_some())?;
            }
            Task::SelfDistill => {
                need("student_config", self.student_config.is_some())?;
                if let (Some(t), Some(s)) = (&self.teacher_config, &self.student_config) {
                    if t != s {
                        return Err(err("teacher_config", "self-distillation needs the student architecture"));
                    }
                }
            }
            _ => {
                need("teacher_config", self.teacher_config.is_some())?;
                need("student_config", self.student_config.is_some())?;
            }
        }
        if matches!(self.task, Task::SweepLambda | Task::SweepAlpha) {
            need("sweep_values", !self.sweep_values.is_empty())?;
        }
        if self.task == Task::SweepLambda && self.mask_mode != MaskMode::Spatial {
            return Err(err("mask_mode", "sweep_lambda varies the spatial ratio; use mask_mode = spatial"));
        }
        for (key, v) in [("lambda", self.lambda), ("beta", self.beta)] {
            if !(0.0..1.0).contains(&v) {
                return Err(err(key, format!("{v} is outside [0, 1)")));
            }
        }
        if self.task == Task::SweepLambda {
            if let Some(v) = self.sweep_values.iter().find(|v| !(0.0..1.0).contains(*v)) {
                return Err(err("sweep_values", format!("mask ratio {v} is outside [0, 1)")));
            }
        }
        if self.task == Task::SweepAlpha {
            if let Some(v) = self.sweep_values.iter().find(|v| !(**v >= 0.0)) {
                return Err(err("sweep_values", format!("alpha {v} is negative")));
            }
        }
        if self.stages.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(err("stages", "empty stage list"));
        }
        if self.sweep_parallel == 0 {
            return Err(err("sweep_parallel", "must be ≥ 1"));
        }
        if self.train_subset == Some(0) || self.val_subset == Some(0) {
            return Err(err(if self.train_subset == Some(0) { "train_subset" } else { "val_subset" }, "must be ≥ 1"));
        }
        self.train_config().validate().map_err(|e| core_config_error(e, "train"))?;
        let teacher = self.teacher_arch()?;
        let student = self.student_arch()?;
        if let (Some(t), Some(s)) = (&teacher, &student) {
            for stage in self.stages_for(s) {
                let (tc, sc) = (t.stage_shape(&stage), s.stage_shape(&stage));
                match (tc, sc) {
                    (Some((_, th, tw)), Some((_, sh, sw))) if (th, tw) == (sh, sw) => {}
                    (Some(_), Some(_)) => {
                        return Err(err("stages", format!("stage `{stage}` differs in spatial size between teacher and student")))
                    }
                    _ => return Err(err("stages", format!("unknown stage `{stage}`"))),
                }
            }
        }
        Ok(())
    }

    fn arch(&self, key: &str, spec: Option<&String>) -> Result<Option<BackboneConfig>, CliError> {
        let (c, size, classes) = self.dataset.geometry();
        spec.map(|s| BackboneConfig::parse(s, c, size, classes).map_err(|e| core_config_error(e, key)))
            .transpose()
    }

    /// Teacher architecture; self-distillation falls back to the student's.
    pub fn teacher_arch(&self) -> Result<Option<BackboneConfig>, CliError> {
        let spec = self.teacher_config.as_ref().or(match self.task {
            Task::SelfDistill => self.student_config.as_ref(),
            _ => None,
        });
        self.arch("teacher_config", spec)
    }

    pub fn student_arch(&self) -> Result<Option<BackboneConfig>, CliError> {
        self.arch("student_config", self.student_config.as_ref())
    }

    pub fn teacher_spec(&self) -> Option<&str> {
        self.teacher_config
            .as_deref()
            .or(if self.task == Task::SelfDistill { self.student_config.as_deref() } else { None })
    }

    /// Configured stages, or the last stage of `student`.
    pub fn stages_for(&self, student: &BackboneConfig) -> Vec<String> {
        self.stages
            .clone()
            .unwrap_or_else(|| student.stage_names().last().cloned().into_iter().collect())
    }

    pub fn mask(&self) -> MaskConfig {
        match self.mask_mode {
            MaskMode::Spatial => MaskConfig::spatial(self.lambda),
            MaskMode::Channel => MaskConfig::channel(self.beta),
        }
    }

    /// Trainer settings; `stages` is filled in by the runner.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            mask: self.mask(),
            stages: Vec::new(),
            logit_kd: self.logit_kd,
            seed: self.seed,
            distill_loss: self.distill_loss,
            projector: self.projector,
            reduction: self.reduction,
            hflip: self.hflip,
            task_loss: true,
            checkpoint_path: None,
        }
    }
}

impl ExperimentConfig {
    /// Renders the resolved document (absolute paths, every default
    /// spelled out); parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(&str, String)> = vec![("task", self.task.to_string())];
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                lines.push((k, v));
            }
        };
        opt("teacher_config", self.teacher_config.clone());
        opt("student_config", self.student_config.clone());
        opt("teacher_checkpoint", self.teacher_checkpoint.as_ref().map(|p| p.display().to_string()));
        let path = |p: &PathBuf| p.display().to_string();
        match &self.dataset {
            DatasetSource::Synthetic { spec, val_per_class } => {
                lines.push(("dataset", "synthetic".into()));
                lines.push(("synthetic_classes", spec.classes.to_string()));
                lines.push(("synthetic_per_class", spec.per_class.to_string()));
                lines.push(("synthetic_val_per_class", val_per_class.to_string()));
                lines.push(("synthetic_size", spec.size.to_string()));
                lines.push(("synthetic_noise", spec.noise.to_string()));
                lines.push(("data_seed", spec.seed.to_string()));
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => {
                lines.push(("dataset", "mnist".into()));
                lines.push(("train_images", path(train_images)));
                lines.push(("train_labels", path(train_labels)));
                lines.push(("val_images", path(val_images)));
                lines.push(("val_labels", path(val_labels)));
            }
            DatasetSource::Cifar10 { dir } => {
                lines.push(("dataset", "cifar10".into()));
                lines.push(("data_dir", path(dir)));
            }
        }
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                lines.push((k, v));
            }
        };
        opt("train_subset", self.train_subset.map(|v| v.to_string()));
        opt("val_subset", self.val_subset.map(|v| v.to_string()));
        opt("stages", self.stages.as_ref().map(|s| s.join(", ")));
        opt("logit_kd_temperature", self.logit_kd.map(|k| k.temperature.to_string()));
        opt("logit_kd_weight", self.logit_kd.map(|k| k.weight.to_string()));
        if !self.sweep_values.is_empty() {
            let v: Vec<String> = self.sweep_values.iter().map(f64::to_string).collect();
            lines.push(("sweep_values", v.join(", ")));
        }
        let mode = match self.mask_mode {
            MaskMode::Spatial => "spatial",
            MaskMode::Channel => "channel",
        };
        let loss = match self.distill_loss {
            DistillLoss::Mgd => "mgd",
            DistillLoss::Mimic => "mimic",
        };
        let reduction = match self.reduction {
            Reduction::Sum => "sum",
            Reduction::BatchMean => "batch_mean",
            Reduction::ElementMean => "element_mean",
        };
        lines.extend([
            ("alpha", self.alpha.to_string()),
            ("lambda", self.lambda.to_string()),
            ("mask_mode", mode.to_string()),
            ("beta", self.beta.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_init", self.lr_init.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", path(&self.out_dir)),
            ("distill_loss", loss.to_string()),
            ("projector_depth", self.projector.depth.to_string()),
            ("projector_kernel", self.projector.kernel.to_string()),
            ("reduction", reduction.to_string()),
            ("hflip", self.hflip.to_string()),
            ("sweep_parallel", self.sweep_parallel.to_string()),
        ]);
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Maps a core config error onto the document key it came from.
fn core_config_error(e: mgd_core::Error, fallback: &str) -> CliError {
    match e {
        mgd_core::Error::Config { field, reason } => {
            let key = match field.as_str() {
                "architecture" => fallback.to_string(),
                "mask ratio" => "lambda".to_string(),
                f => f.to_string(),
            };
            err(&key, reason)
        }
        other => err(fallback, other.to_string()),
    }
}
