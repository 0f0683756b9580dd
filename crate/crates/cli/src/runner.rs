//! Task execution.

use std::fs;
use std::path::{Path, PathBuf};

use mgd_core::data::{load_cifar_binary, load_idx, make_synthetic, LabeledDataset, Normalization, Split, SyntheticSpec};
use mgd_core::distill::{MaskMode, ProjectorSpec};
use mgd_core::models::{BackboneConfig, ModelInstance};
use mgd_core::trainer::{self, write_metrics_csv, MetricsRecord, StepLog, TrainReport};

use crate::config::{DatasetSource, ExperimentConfig, Task};
use crate::report::{compare, curves_svg, RunResult};
use crate::CliError;

pub const TEACHER_CHECKPOINT: &str = "teacher.mgdc";
pub const STUDENT_CHECKPOINT: &str = "student.mgdc";
pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

/// Results of a task, one entry per trained model, keyed by the run
/// directory relative to `out_dir` (`.` for the top-level run).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub runs: Vec<(String, RunResult)>,
}

pub struct Data {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub normalization: Normalization,
}

/// Loads both splits, applies the subsets and normalizes with statistics
/// of the (subset) train split.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data, CliError> {
    let (mut train, mut val) = match &cfg.dataset {
        DatasetSource::Synthetic { spec, val_per_class } => (
            make_synthetic(spec, Split::Train)?,
            make_synthetic(
                &SyntheticSpec {
                    per_class: *val_per_class,
                    ..spec.clone()
                },
                Split::Val,
            )?,
        ),
        DatasetSource::Idx {
            train_images,
            train_labels,
            val_images,
            val_labels,
        } => (
            load_idx(train_images, train_labels, Split::Train)?,
            load_idx(val_images, val_labels, Split::Val)?,
        ),
        DatasetSource::Cifar10 { dir } => {
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                load_cifar_binary(&train_files, Split::Train)?,
                load_cifar_binary(&[dir.join("test_batch.bin")], Split::Val)?,
            )
        }
    };
    if let Some(n) = cfg.train_subset {
        train = train.take(n);
    }
    if let Some(n) = cfg.val_subset {
        val = val.take(n);
    }
    if train.is_empty() || val.is_empty() {
        return Err(CliError::runtime("dataset split is empty"));
    }
    let normalization = train.channel_stats();
    train.normalize(&normalization)?;
    val.normalize(&normalization)?;
    Ok(Data {
        train,
        val,
        normalization,
    })
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn fmt_list(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn write_run_files(cfg: &ExperimentConfig, data: &Data, records: &[MetricsRecord], result: &RunResult) -> Result<(), CliError> {
    let dir = &cfg.out_dir;
    write_metrics_csv(&dir.join("metrics.csv"), records)?;
    result.write(dir)?;
    let svg = dir.join("curves.svg");
    io(fs::write(&svg, curves_svg(records)), &svg)?;
    let n = &data.normalization;
    let text = format!(
        "{}# normalization mean = {}\n# normalization std = {}\n",
        cfg.to_text(),
        fmt_list(&n.mean),
        fmt_list(&n.std)
    );
    let path = dir.join(RESOLVED_CONFIG);
    io(fs::write(&path, text), &path)
}

/// Prints per-epoch mean losses from the step stream.
struct Progress<'a> {
    name: &'a str,
    on: bool,
    epoch: usize,
    sums: (f64, f64, usize),
}

impl<'a> Progress<'a> {
    fn new(name: &'a str, on: bool) -> Self {
        Self {
            name,
            on,
            epoch: 1,
            sums: (0.0, 0.0, 0),
        }
    }

    fn step(&mut self, log: &StepLog) {
        if log.epoch != self.epoch {
            self.flush();
            self.epoch = log.epoch;
        }
        self.sums.0 += log.loss_original;
        self.sums.1 += log.loss_dis;
        self.sums.2 += 1;
    }

    fn flush(&mut self) {
        let (t, d, n) = std::mem::take(&mut self.sums);
        if self.on && n > 0 {
            eprintln!(
                "[{}] epoch {}: task loss {:.4}, distillation loss {:.4}",
                self.name,
                self.epoch,
                t / n as f64,
                d / n as f64
            );
        }
    }
}

fn label(cfg: &ExperimentConfig) -> String {
    cfg.out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

/// Plain cross-entropy training of `arch`, saving `teacher.mgdc`.
fn baseline_member(cfg: &ExperimentConfig, arch: &BackboneConfig, spec: &str, data: &Data, opts: RunOptions) -> Result<RunResult, CliError> {
    io(fs::create_dir_all(&cfg.out_dir), &cfg.out_dir)?;
    let mut model = ModelInstance::build(arch, cfg.seed)?;
    let tc = trainer::TrainConfig {
        checkpoint_path: Some(cfg.out_dir.join(TEACHER_CHECKPOINT)),
        ..cfg.train_config()
    };
    let name = label(cfg);
    let mut progress = Progress::new(&name, opts.progress);
    let report = trainer::train_baseline_observed(&mut model, &data.train, &data.val, &tc, &mut |l| progress.step(l))?;
    progress.flush();
    let result = RunResult::from_records("baseline", spec, cfg.seed, &report.records)?;
    write_run_files(cfg, data, &report.records, &result)?;
    Ok(result)
}

/// Distills the student of `cfg` from the checkpoint at
/// `cfg.teacher_checkpoint`, saving `student.mgdc`.
fn distill_member(cfg: &ExperimentConfig, data: &Data, opts: RunOptions) -> Result<RunResult, CliError> {
    let teacher_arch = cfg.teacher_arch()?.ok_or_else(|| CliError::runtime("no teacher architecture"))?;
    let student_arch = cfg.student_arch()?.ok_or_else(|| CliError::runtime("no student architecture"))?;
    let ckpt = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| CliError::runtime("no teacher checkpoint"))?;
    io(fs::create_dir_all(&cfg.out_dir), &cfg.out_dir)?;

    let mut teacher = ModelInstance::build(&teacher_arch, 0)?;
    teacher.load(ckpt)?;
    teacher.freeze();
    let before = teacher.state_hash();

    let mut student = ModelInstance::build(&student_arch, cfg.seed)?;
    let tc = trainer::TrainConfig {
        stages: cfg.stages_for(&student_arch),
        checkpoint_path: Some(cfg.out_dir.join(STUDENT_CHECKPOINT)),
        ..cfg.train_config()
    };
    let name = label(cfg);
    let mut progress = Progress::new(&name, opts.progress);
    let report: TrainReport =
        trainer::train_distill_observed(&teacher, &mut student, &data.train, &data.val, &tc, &mut |l| progress.step(l))?;
    progress.flush();

    let after = teacher.state_hash();
    if after != before {
        return Err(CliError::runtime(format!("teacher changed during distillation ({before} -> {after})")));
    }
    let student_spec = cfg.student_config.as_deref().unwrap_or_default();
    let mut result = RunResult::from_records("distill", student_spec, cfg.seed, &report.records)?;
    result.teacher_hash = Some(before);
    write_run_files(cfg, data, &report.records, &result)?;
    Ok(result)
}

/// Member configs of a fan-out task, each a standalone `distill` run.
pub fn members(cfg: &ExperimentConfig, teacher_checkpoint: &Path) -> Result<Vec<ExperimentConfig>, CliError> {
    let base = ExperimentConfig {
        task: Task::Distill,
        teacher_checkpoint: Some(teacher_checkpoint.to_path_buf()),
        sweep_values: Vec::new(),
        sweep_parallel: 1,
        ..cfg.clone()
    };
    let member = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut m = base.clone();
        m.out_dir = cfg.out_dir.join(name);
        f(&mut m);
        m
    };
    let out = match cfg.task {
        Task::SweepLambda => cfg
            .sweep_values
            .iter()
            .map(|&v| member(format!("lambda_{v}"), &|m| m.lambda = v))
            .collect(),
        Task::SweepAlpha => cfg
            .sweep_values
            .iter()
            .map(|&v| member(format!("alpha_{v}"), &|m| m.alpha = v))
            .collect(),
        Task::AblateProjector => {
            let mut v = Vec::new();
            for depth in 1..=3 {
                for kernel in [3, 5] {
                    v.push(member(format!("depth{depth}_kernel{kernel}"), &|m| {
                        m.projector = ProjectorSpec { depth, kernel }
                    }));
                }
            }
            v
        }
        Task::AblateStage => {
            let student = cfg.student_arch()?.ok_or_else(|| CliError::runtime("no student architecture"))?;
            let teacher = cfg.teacher_arch()?.ok_or_else(|| CliError::runtime("no teacher architecture"))?;
            let stages: Vec<String> = match &cfg.stages {
                Some(s) => s.clone(),
                None => student
                    .stage_names()
                    .into_iter()
                    .filter(|s| match (student.stage_shape(s), teacher.stage_shape(s)) {
                        (Some((_, sh, sw)), Some((_, th, tw))) => (sh, sw) == (th, tw),
                        _ => false,
                    })
                    .collect(),
            };
            if stages.is_empty() {
                return Err(CliError::Config {
                    key: "stages".into(),
                    message: "teacher and student share no stage resolution".into(),
                });
            }
            let mut v: Vec<ExperimentConfig> = stages
                .iter()
                .map(|s| member(s.clone(), &|m| m.stages = Some(vec![s.clone()])))
                .collect();
            if stages.len() > 1 {
                v.push(member("combined".into(), &|m| m.stages = Some(stages.clone())));
            }
            v
        }
        Task::AblateChannelMask => vec![
            member("spatial".into(), &|m| m.mask_mode = MaskMode::Spatial),
            member("channel".into(), &|m| m.mask_mode = MaskMode::Channel),
        ],
        _ => Vec::new(),
    };
    Ok(out)
}

fn run_members(members: &[ExperimentConfig], data: &Data, parallel: usize, opts: RunOptions) -> Result<Vec<RunResult>, CliError> {
    let mut results = Vec::with_capacity(members.len());
    for chunk in members.chunks(parallel.max(1)) {
        let chunk_results: Vec<Result<RunResult, CliError>> = if chunk.len() == 1 {
            vec![distill_member(&chunk[0], data, opts)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|m| s.spawn(move || distill_member(m, data, opts))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(CliError::runtime("sweep member panicked"))))
                    .collect()
            })
        };
        for r in chunk_results {
            results.push(r?);
        }
    }
    Ok(results)
}

/// Trains a teacher into `out_dir/teacher` unless a checkpoint is given.
fn ensure_teacher(cfg: &ExperimentConfig, data: &Data, opts: RunOptions, runs: &mut Vec<(String, RunResult)>) -> Result<PathBuf, CliError> {
    if let Some(p) = &cfg.teacher_checkpoint {
        return Ok(p.clone());
    }
    let arch = cfg.teacher_arch()?.ok_or_else(|| CliError::runtime("no teacher architecture"))?;
    let spec = cfg.teacher_spec().unwrap_or_default().to_string();
    let tcfg = ExperimentConfig {
        task: Task::TrainTeacher,
        teacher_config: Some(spec.clone()),
        out_dir: cfg.out_dir.join("teacher"),
        ..cfg.clone()
    };
    let r = baseline_member(&tcfg, &arch, &spec, data, opts)?;
    runs.push(("teacher".into(), r));
    Ok(tcfg.out_dir.join(TEACHER_CHECKPOINT))
}

/// Executes the task of `cfg`. Config problems found before training
/// surface as [`CliError::Config`]; everything later as runtime errors.
pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    io(fs::create_dir_all(&cfg.out_dir), &cfg.out_dir)?;
    let mut runs = Vec::new();
    match cfg.task {
        Task::TrainTeacher => {
            let arch = cfg.teacher_arch()?.ok_or_else(|| CliError::runtime("no teacher architecture"))?;
            let spec = cfg.teacher_config.clone().unwrap_or_default();
            runs.push((".".into(), baseline_member(cfg, &arch, &spec, &data, opts)?));
        }
        Task::Distill => runs.push((".".into(), distill_member(cfg, &data, opts)?)),
        Task::SelfDistill => {
            let ckpt = ensure_teacher(cfg, &data, opts, &mut runs)?;
            let student = ExperimentConfig {
                teacher_checkpoint: Some(ckpt),
                teacher_config: cfg.teacher_spec().map(str::to_string),
                ..cfg.clone()
            };
            runs.push((".".into(), distill_member(&student, &data, opts)?));
        }
        _ => {
            let ckpt = ensure_teacher(cfg, &data, opts, &mut runs)?;
            let members = members(cfg, &ckpt)?;
            let results = run_members(&members, &data, cfg.sweep_parallel, opts)?;
            let dirs: Vec<PathBuf> = members.iter().map(|m| m.out_dir.clone()).collect();
            compare(&dirs, &cfg.out_dir.join("compare.csv"))?;
            for (m, r) in members.iter().zip(results) {
                runs.push((label(m), r));
            }
        }
    }
    Ok(RunOutcome { runs })
}
