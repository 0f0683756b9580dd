use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,top1,top5,loss_task,loss_dis,feature_diff";

/// One row of `metrics.csv`. Accuracies are percentages; fields that do
/// not apply to a run (top-5 with fewer than 5 classes, distillation
/// quantities of a baseline run) are `None` and written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
    pub top5: Option<f64>,
    pub loss_task: f64,
    pub loss_dis: Option<f64>,
    pub feature_diff: Option<f64>,
}

/// Whether label `y` is among the `k` highest logits. Ties are broken
/// toward the lower class index.
pub fn topk_hits(logits: &[f32], y: usize, k: usize) -> bool {
    let ly = logits[y];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > ly || (l == ly && j < y))
        .count();
    rank < k
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split.as_str(),
            r.top1,
            cell(r.top5),
            r.loss_task,
            cell(r.loss_dis),
            cell(r.feature_diff)
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}
