//! Stage-feature heatmaps as binary PGM images.

use std::fs;
use std::path::Path;

use mgd_core::models::{Mode, ModelInstance};
use mgd_core::{no_grad, Tensor};

use crate::config::ExperimentConfig;
use crate::runner::load_data;
use crate::CliError;

/// Binary greymap (`P5`, maxval 255).
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Channel-mean absolute activation of a `(1, C, H, W)` feature, min-max
/// scaled to `0..=255`. A constant map becomes uniform mid-grey.
pub fn heatmap_pixels(feature: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>), CliError> {
    let &[1, c, h, w] = feature.shape() else {
        return Err(CliError::runtime(format!("expected a single-image feature, got {:?}", feature.shape())));
    };
    let data = feature.data();
    let plane = h * w;
    let means: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|k| (data[k * plane + p] as f64).abs()).sum::<f64>() / c as f64)
        .collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi - lo > 0.0 {
        means.iter().map(|&m| ((m - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; plane]
    };
    Ok((w, h, pixels))
}

/// Loads `checkpoint` into the architecture named by `config` (student,
/// or teacher for teacher-training configs), runs validation image
/// `index` and writes the heatmap of `stage` to `out`.
pub fn dump_feature_heatmap(checkpoint: &Path, config: &Path, index: usize, stage: &str, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let arch = match cfg.student_arch()? {
        Some(a) => a,
        None => cfg.teacher_arch()?.ok_or_else(|| CliError::Config {
            key: "student_config".into(),
            message: "config names no architecture".into(),
        })?,
    };
    if arch.stage_shape(stage).is_none() {
        return Err(CliError::Config {
            key: "stage".into(),
            message: format!("unknown stage `{stage}`; the model has {}", arch.stage_names().join(", ")),
        });
    }
    let mut model = ModelInstance::build(&arch, 0)?;
    model.load(checkpoint)?;
    model.set_mode(Mode::Eval);
    let data = load_data(&cfg)?;
    if index >= data.val.len() {
        return Err(CliError::runtime(format!("image index {index} out of range (validation split has {})", data.val.len())));
    }
    let image = data.val.gather(&[index]).images;
    let feature = no_grad(|| model.forward_with_features(&image))?;
    let f = feature
        .features
        .get(stage)
        .ok_or_else(|| CliError::runtime(format!("stage `{stage}` missing from forward pass")))?;
    let (w, h, pixels) = heatmap_pixels(f)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(out, pgm_bytes(w, h, &pixels)).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))
}
