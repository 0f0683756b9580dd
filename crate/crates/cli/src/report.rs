//! `result.json`, comparison tables and SVG training curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mgd_core::data::Split;
use mgd_core::trainer::MetricsRecord;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESULT_FILE: &str = "result.json";
pub const COMPARE_HEADER: &str = "name,top1,top5,feature_diff";

/// Final numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// `baseline` or `distill`.
    pub kind: String,
    pub model: String,
    pub epochs: usize,
    pub seed: u64,
    pub top1: f64,
    pub top5: Option<f64>,
    pub loss_task: f64,
    pub feature_diff: Option<f64>,
    /// Hash of the frozen teacher, checked unchanged after the run.
    pub teacher_hash: Option<String>,
}

impl RunResult {
    pub fn from_records(kind: &str, model: &str, seed: u64, records: &[MetricsRecord]) -> Result<Self, CliError> {
        let last = records
            .iter()
            .rev()
            .find(|r| r.split == Split::Val)
            .ok_or_else(|| CliError::runtime("run produced no validation record"))?;
        Ok(Self {
            kind: kind.to_string(),
            model: model.to_string(),
            epochs: last.epoch,
            seed,
            top1: last.top1,
            top5: last.top5,
            loss_task: last.loss_task,
            feature_diff: last.feature_diff,
            teacher_hash: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(RESULT_FILE);
        let text = serde_json::to_string_pretty(self).map_err(CliError::runtime)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }

    pub fn read(dir: &Path) -> Result<Self, String> {
        let path = dir.join(RESULT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub top1: f64,
    pub top5: Option<f64>,
    pub feature_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    /// Directories whose `result.json` could not be read, with the reason.
    pub missing: Vec<(PathBuf, String)>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.name, r.top1, cell(r.top5), cell(r.feature_diff)).expect("writing to a String");
    }
    out
}

/// One row per readable run directory, named after the directory and
/// sorted by top-1 descending, written to `out`. Unreadable directories
/// are collected in `missing` and do not stop the others.
pub fn compare(dirs: &[PathBuf], out: &Path) -> Result<CompareOutcome, CliError> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        match RunResult::read(dir) {
            Ok(r) => rows.push(CompareRow {
                name: dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| dir.display().to_string()),
                top1: r.top1,
                top5: r.top5,
                feature_diff: r.feature_diff,
            }),
            Err(e) => missing.push((dir.clone(), e)),
        }
    }
    rows.sort_by(|a, b| b.top1.total_cmp(&a.top1));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(out, compare_csv(&rows)).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    Ok(CompareOutcome { rows, missing })
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 48.0;

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series]) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| x0 + MARGIN + (x - xmin) / (xmax - xmin) * w;
    let sy = |y: f64| MARGIN + h - (y - ymin) / (ymax - ymin) * h;
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##,
        x0 + MARGIN
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="24" font-size="13">{title}</text>"#, x0 + MARGIN);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="10">epoch</text>"#,
        x0 + MARGIN + w / 2.0 - 14.0,
        PANEL_H - 10.0
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">{ymax:.4}</text>"#, x0 + 2.0, MARGIN + 4.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">{ymin:.4}</text>"#, x0 + 2.0, MARGIN + h);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            path.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{}">{}</text>"#,
            x0 + PANEL_W - MARGIN - 60.0,
            MARGIN + 14.0 + 12.0 * i as f64,
            s.color,
            s.label
        );
    }
}

/// Task loss per split, plus distillation loss and feature difference
/// when the run has them, against epoch.
pub fn curves_svg(records: &[MetricsRecord]) -> String {
    let of = |split: Split, f: fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect()
    };
    let mut panels: Vec<(&str, Vec<Series>)> = vec![(
        "task loss",
        vec![
            Series {
                label: "train",
                color: "#1f77b4",
                points: of(Split::Train, |r| Some(r.loss_task)),
            },
            Series {
                label: "val",
                color: "#d62728",
                points: of(Split::Val, |r| Some(r.loss_task)),
            },
        ],
    )];
    let dis = of(Split::Val, |r| r.loss_dis);
    if !dis.is_empty() {
        panels.push((
            "distillation loss",
            vec![
                Series {
                    label: "train",
                    color: "#1f77b4",
                    points: of(Split::Train, |r| r.loss_dis),
                },
                Series {
                    label: "val",
                    color: "#d62728",
                    points: dis,
                },
            ],
        ));
    }
    let fd = of(Split::Val, |r| r.feature_diff);
    if !fd.is_empty() {
        panels.push((
            "feature difference",
            vec![Series {
                label: "val",
                color: "#2ca02c",
                points: fd,
            }],
        ));
    }
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif">"#,
        PANEL_W * panels.len() as f64
    );
    out.push('\n');
    for (i, (title, series)) in panels.iter().enumerate() {
        panel(&mut out, i as f64 * PANEL_W, title, series);
    }
    out.push_str("</svg>\n");
    out
}
