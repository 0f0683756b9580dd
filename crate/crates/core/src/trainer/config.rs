use std::path::PathBuf;

use crate::distill::{MaskConfig, ProjectorSpec, Reduction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillLoss {
    /// Masked generative reconstruction through the generative block.
    Mgd,
    /// Direct squared-L2 matching through the adaptation layer only.
    Mimic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitKd {
    pub temperature: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub mask: MaskConfig,
    pub stages: Vec<String>,
    pub logit_kd: Option<LogitKd>,
    pub seed: u64,
    pub distill_loss: DistillLoss,
    pub projector: ProjectorSpec,
    pub reduction: Reduction,
    /// Random horizontal flips on training batches.
    pub hflip: bool,
    /// When false the objective is `alpha * L_dis` alone.
    pub task_loss: bool,
    /// Where to write the final student checkpoint.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// The desk-scale recipe: 30 epochs, batch 128, lr 0.1 decayed ×0.1
    /// every 12 epochs, momentum 0.9, weight decay 1e-4, alpha 7e-5,
    /// spatial masking at 0.5 on the last stage of a four-stage backbone.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr_init: 0.1,
            lr_decay_factor: 0.1,
            lr_decay_every: 12,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 7e-5,
            mask: MaskConfig::spatial(0.5),
            stages: vec!["stage4".into()],
            logit_kd: None,
            seed: 0,
            distill_loss: DistillLoss::Mgd,
            projector: ProjectorSpec::default(),
            reduction: Reduction::Sum,
            hflip: false,
            task_loss: true,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// `lr_init · decay^⌊epoch / decay_every⌋` for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init * self.lr_decay_factor.powi((epoch / self.lr_decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: String| if ok { Ok(()) } else { Err(Error::config(field, reason)) };
        check(self.epochs >= 1, "epochs", format!("must be ≥ 1, got {}", self.epochs))?;
        check(self.batch_size >= 1, "batch_size", format!("must be ≥ 1, got {}", self.batch_size))?;
        check(self.lr_init > 0.0, "lr_init", format!("must be > 0, got {}", self.lr_init))?;
        check(self.lr_decay_every >= 1, "lr_decay_every", format!("must be ≥ 1, got {}", self.lr_decay_every))?;
        check(
            self.lr_decay_factor > 0.0,
            "lr_decay_factor",
            format!("must be > 0, got {}", self.lr_decay_factor),
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            format!("must be in [0, 1), got {}", self.momentum),
        )?;
        check(self.weight_decay >= 0.0, "weight_decay", format!("must be ≥ 0, got {}", self.weight_decay))?;
        check(self.alpha >= 0.0, "alpha", format!("must be ≥ 0, got {}", self.alpha))?;
        if let Some(kd) = &self.logit_kd {
            check(
                kd.temperature > 0.0,
                "logit_kd_temperature",
                format!("must be > 0, got {}", kd.temperature),
            )?;
            check(kd.weight >= 0.0, "logit_kd_weight", format!("must be ≥ 0, got {}", kd.weight))?;
        }
        self.mask.validate()?;
        self.projector.validate()
    }
}
