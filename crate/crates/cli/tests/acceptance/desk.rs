//! Criteria 4-9: desk-scale training runs through the experiment runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mgd_cli::{run, ExperimentConfig, RunOptions, RunOutcome, RunResult};
use sha2::{Digest, Sha256};

use crate::props::Verdict;

pub const ARCH: &str = "basic:8:1x8,1x16d,1x32d";
pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const ALPHA: f64 = 7e-5;
pub const LAMBDAS: [f64; 4] = [0.0, 0.3, 0.5, 0.8];

/// 10 classes, 10k train / 2k val images of 12×12, 30 epochs.
fn desk_doc(seed: u64) -> String {
    format!(
        "dataset = synthetic
synthetic_classes = 10
synthetic_per_class = 1000
synthetic_val_per_class = 200
synthetic_size = 12
synthetic_noise = 1.0
data_seed = 0
epochs = 30
batch_size = 128
lr_init = 0.1
lr_decay_every = 12
lr_decay_factor = 0.1
momentum = 0.9
weight_decay = 1e-4
alpha = {ALPHA}
lambda = 0.5
teacher_config = {ARCH}
student_config = {ARCH}
seed = {seed}
"
    )
}

const SMALL: &str = "dataset = synthetic
synthetic_classes = 4
synthetic_per_class = 24
synthetic_val_per_class = 8
synthetic_size = 8
epochs = 2
batch_size = 16
lr_init = 0.05
alpha = 1e-3
teacher_config = basic:4:1x4,1x8d,1x8d
student_config = basic:4:1x4,1x8d,1x8d
";

pub fn sha256_hex(path: &Path) -> Result<String, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Every distillation run of the suite, with the teacher checkpoint hash
/// before and after it.
#[derive(Default)]
pub struct HashLog {
    pub runs: Vec<(String, String, String)>,
}

fn run_doc(dir: &Path, name: &str, doc: &str) -> Result<RunOutcome, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let path = dir.join(format!("{name}.cfg"));
    fs::write(&path, format!("{doc}out_dir = {name}\n")).map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let out = run(&cfg, RunOptions { progress: false }).map_err(|e| format!("{name}: {e}"))?;
    for (label, r) in &out.runs {
        eprintln!(
            "    {}/{name}/{label}: top1 {:.2}, feature_diff {} ({:.0} s)",
            dir.file_name().unwrap_or_default().to_string_lossy(),
            r.top1,
            r.feature_diff.map(|v| format!("{v:.1}")).unwrap_or("-".into()),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(out)
}

fn run_distill(log: &mut HashLog, ckpt: &Path, dir: &Path, name: &str, doc: &str) -> Result<RunOutcome, String> {
    let before = sha256_hex(ckpt)?;
    let doc = format!("{doc}teacher_checkpoint = {}\n", ckpt.display());
    let out = run_doc(dir, name, &doc);
    let after = sha256_hex(ckpt)?;
    log.runs.push((dir.join(name).display().to_string(), before, after));
    out
}

fn member<'a>(out: &'a RunOutcome, label: &str) -> Result<&'a RunResult, String> {
    out.runs
        .iter()
        .find(|(l, _)| l == label)
        .map(|(_, r)| r)
        .ok_or_else(|| format!("no member `{label}` in {:?}", out.runs.iter().map(|(l, _)| l).collect::<Vec<_>>()))
}

/// Validation feature difference at epoch 0 from a run's metrics.csv.
fn initial_feature_diff(dir: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|c| c[0] == "0" && c[1] == "val")
        .and_then(|c| c[6].parse().ok())
        .ok_or_else(|| "no epoch-0 feature difference".into())
}

pub struct SeedRuns {
    pub baseline: RunResult,
    pub mgd: RunResult,
    pub mimic: RunResult,
    pub mimic_initial_fd: f64,
    pub lambda: Vec<(f64, RunResult)>,
    pub alpha: Vec<(f64, RunResult)>,
}

/// Teacher (which is also the no-distillation baseline), the λ sweep,
/// the α sweep and a direct-mimic run for one seed.
pub fn seed_runs(root: &Path, seed: u64, log: &mut HashLog) -> Result<SeedRuns, String> {
    let dir = root.join(format!("seed{seed}"));
    let doc = desk_doc(seed);
    let teacher = run_doc(&dir, "teacher", &format!("{doc}task = train_teacher\n"))?;
    let baseline = member(&teacher, ".")?.clone();
    let ckpt = dir.join("teacher/teacher.mgdc");

    let values = LAMBDAS.map(|v| v.to_string()).join(", ");
    let sweep = run_distill(log, &ckpt, &dir, "lambda", &format!("{doc}task = sweep_lambda\nsweep_values = {values}\n"))?;
    let lambda = LAMBDAS
        .iter()
        .map(|&v| member(&sweep, &format!("lambda_{v}")).map(|r| (v, r.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mgd = lambda.iter().find(|(v, _)| *v == 0.5).map(|(_, r)| r.clone()).ok_or("λ=0.5 missing")?;

    let (half, double) = (ALPHA / 2.0, ALPHA * 2.0);
    let sweep = run_distill(log, &ckpt, &dir, "alpha", &format!("{doc}task = sweep_alpha\nsweep_values = {half}, {double}\n"))?;
    let alpha = vec![
        (half, member(&sweep, &format!("alpha_{half}"))?.clone()),
        (ALPHA, mgd.clone()),
        (double, member(&sweep, &format!("alpha_{double}"))?.clone()),
    ];

    let mimic = run_distill(log, &ckpt, &dir, "mimic", &format!("{doc}task = distill\ndistill_loss = mimic\n"))?;
    let mimic = member(&mimic, ".")?.clone();
    let mimic_initial_fd = initial_feature_diff(&dir.join("mimic"))?;
    Ok(SeedRuns {
        baseline,
        mgd,
        mimic,
        mimic_initial_fd,
        lambda,
        alpha,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_seed(runs: &[SeedRuns], f: impl Fn(&SeedRuns) -> f64) -> String {
    runs.iter().map(|r| format!("{:.2}", f(r))).collect::<Vec<_>>().join("/")
}

pub fn trend(runs: &[SeedRuns]) -> Verdict {
    let b = mean(runs.iter().map(|r| r.baseline.top1));
    let m = mean(runs.iter().map(|r| r.mgd.top1));
    let i = mean(runs.iter().map(|r| r.mimic.top1));
    Verdict {
        pass: m >= b && m >= i,
        detail: format!(
            "seed-mean top1: baseline {b:.2}, MGD {m:.2}, mimic {i:.2} (per seed {} / {} / {}); need MGD ≥ baseline and MGD ≥ mimic",
            per_seed(runs, |r| r.baseline.top1),
            per_seed(runs, |r| r.mgd.top1),
            per_seed(runs, |r| r.mimic.top1)
        ),
    }
}

pub fn feature_difference(runs: &[SeedRuns]) -> Verdict {
    let fd = |r: &RunResult| r.feature_diff.unwrap_or(f64::NAN);
    let pass = runs
        .iter()
        .all(|r| fd(&r.mimic) < r.mimic_initial_fd && fd(&r.mgd) > fd(&r.mimic));
    Verdict {
        pass,
        detail: format!(
            "mimic initial {} -> final {}; MGD final {} (per seed)",
            per_seed(runs, |r| r.mimic_initial_fd),
            per_seed(runs, |r| fd(&r.mimic)),
            per_seed(runs, |r| fd(&r.mgd))
        ),
    }
}

pub fn sensitivity(runs: &[SeedRuns]) -> Verdict {
    let b = mean(runs.iter().map(|r| r.baseline.top1));
    let lam: Vec<(f64, f64)> = LAMBDAS
        .iter()
        .enumerate()
        .map(|(k, &v)| (v, mean(runs.iter().map(|r| r.lambda[k].1.top1))))
        .collect();
    let at = |v: f64| lam.iter().find(|(x, _)| *x == v).map(|(_, t)| *t).unwrap_or(f64::NAN);
    let floor_ok = lam.iter().all(|(_, t)| *t >= b - 0.5);
    let alpha: Vec<(f64, f64)> = (0..3)
        .map(|k| (runs[0].alpha[k].0, mean(runs.iter().map(|r| r.alpha[k].1.top1))))
        .collect();
    let hi = alpha.iter().map(|a| a.1).fold(f64::MIN, f64::max);
    let lo = alpha.iter().map(|a| a.1).fold(f64::MAX, f64::min);
    let fmt = |v: &[(f64, f64)], key: &str| v.iter().map(|(x, t)| format!("{key}={x}: {t:.2}")).collect::<Vec<_>>().join(", ");
    Verdict {
        pass: at(0.5) >= at(0.0) && floor_ok && hi - lo < 1.0,
        detail: format!(
            "baseline {b:.2}; {}; {} (spread {:.2})",
            fmt(&lam, "λ"),
            fmt(&alpha, "α"),
            hi - lo
        ),
    }
}

fn table_names(path: &Path) -> Result<Vec<String>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(mgd_cli::COMPARE_HEADER) {
        return Err(format!("{}: bad header", path.display()));
    }
    let mut names: Vec<String> = lines.map(|l| l.split(',').next().unwrap_or("").to_string()).collect();
    names.sort();
    Ok(names)
}

/// Runs the three ablation tasks on a small problem and checks that each
/// fans out to the expected grid and writes its comparison table.
pub fn ablation_grid(root: &Path, log: &mut HashLog) -> Result<Vec<String>, String> {
    {
        let dir = root.join("ablations");
        run_doc(&dir, "teacher", &format!("{SMALL}task = train_teacher\n"))?;
        let ckpt = dir.join("teacher/teacher.mgdc");
        let mut notes = Vec::new();
        let grids: [(&str, &str, Vec<&str>); 3] = [
            (
                "projector",
                "task = ablate_projector\n",
                vec!["depth1_kernel3", "depth1_kernel5", "depth2_kernel3", "depth2_kernel5", "depth3_kernel3", "depth3_kernel5"],
            ),
            ("stage", "task = ablate_stage\n", vec!["combined", "stage1", "stage2", "stage3"]),
            ("channel", "task = ablate_channel_mask\nbeta = 0.15\n", vec!["channel", "spatial"]),
        ];
        for (name, task, expected) in grids {
            run_distill(log, &ckpt, &dir, name, &format!("{SMALL}{task}"))?;
            let got = table_names(&dir.join(name).join("compare.csv"))?;
            if got != expected {
                return Err(format!("{name}: table rows {got:?}, expected {expected:?}"));
            }
            for m in &expected {
                for f in ["metrics.csv", "result.json", "config.resolved"] {
                    if !dir.join(name).join(m).join(f).exists() {
                        return Err(format!("{name}/{m}/{f} missing"));
                    }
                }
            }
            notes.push(format!("{name}: {} rows", got.len()));
        }
        let resolved = fs::read_to_string(dir.join("channel/channel/config.resolved")).map_err(|e| e.to_string())?;
        if !(resolved.contains("mask_mode = channel") && resolved.contains("beta = 0.15")) {
            return Err("channel member does not run β=0.15 channel masking".into());
        }
        let resolved = fs::read_to_string(dir.join("stage/combined/config.resolved")).map_err(|e| e.to_string())?;
        if !resolved.contains("stage1, stage2, stage3") {
            return Err("combined member does not distill every stage".into());
        }
        Ok(notes)
    }
}

/// Grid check plus the trend of the canonical depth 2, kernel 3 row.
pub fn ablations(grid: Result<Vec<String>, String>, runs: Option<&[SeedRuns]>) -> Verdict {
    match (grid, runs) {
        (Err(e), _) => Verdict { pass: false, detail: e },
        (Ok(notes), None) => Verdict {
            pass: false,
            detail: format!("{}; canonical-row trend not evaluated (desk runs skipped)", notes.join(", ")),
        },
        (Ok(notes), Some(runs)) => {
            // the criterion-4 distillation runs use the default depth 2, kernel 3 projector
            let b = mean(runs.iter().map(|r| r.baseline.top1));
            let m = mean(runs.iter().map(|r| r.mgd.top1));
            Verdict {
                pass: m >= b,
                detail: format!("{}; depth2_kernel3 seed-mean top1 {m:.2} vs baseline {b:.2}", notes.join(", ")),
            }
        }
    }
}

pub fn frozen_teacher(log: &HashLog) -> Verdict {
    let changed: Vec<&str> = log.runs.iter().filter(|(_, a, b)| a != b).map(|(n, _, _)| n.as_str()).collect();
    Verdict {
        pass: !log.runs.is_empty() && changed.is_empty(),
        detail: if log.runs.is_empty() {
            "no distillation run was made".into()
        } else if changed.is_empty() {
            format!("teacher checkpoint sha256 unchanged across {} distillation tasks", log.runs.len())
        } else {
            format!("checkpoint changed during {}", changed.join(", "))
        },
    }
}

fn binary_run(cfg: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mgd"))
        .args(["run", "-q"])
        .arg(cfg)
        .env("MGD_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

/// Every metrics.csv under `dir`, relative path first.
fn metrics_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
                let bytes = fs::read(&p).unwrap_or_default();
                out.push((p.strip_prefix(dir).unwrap_or(&p).to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

pub fn determinism(root: &Path) -> Verdict {
    let result = (|| -> Result<String, String> {
        let dir = root.join("determinism");
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let base = desk_doc(3)
            .replace("synthetic_per_class = 1000", "synthetic_per_class = 60")
            .replace("synthetic_val_per_class = 200", "synthetic_val_per_class = 20")
            .replace("epochs = 30", "epochs = 3")
            .replace("lr_decay_every = 12", "lr_decay_every = 2");
        let mut compared = 0;
        for (task, extra) in [("self_distill", ""), ("ablate_channel_mask", "")] {
            let mut trees = Vec::new();
            for copy in ["a", "b"] {
                let cfg = dir.join(format!("{task}_{copy}.cfg"));
                fs::write(&cfg, format!("{base}task = {task}\n{extra}out_dir = {task}_{copy}\n")).map_err(|e| e.to_string())?;
                binary_run(&cfg)?;
                trees.push(metrics_files(&dir.join(format!("{task}_{copy}"))));
            }
            if trees[0].is_empty() || trees[0] != trees[1] {
                return Err(format!("{task}: metrics.csv differs between repeated runs"));
            }
            compared += trees[0].len();
        }
        Ok(format!("{compared} metrics.csv files byte-identical across repeated runs (MGD_THREADS=1)"))
    })();
    match result {
        Ok(d) => Verdict { pass: true, detail: d },
        Err(e) => Verdict { pass: false, detail: e },
    }
}
