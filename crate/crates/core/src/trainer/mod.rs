//! Baseline and distillation training loops, evaluation and
//! feature-difference tracking.

mod config;
mod metrics;

use crate::data::{random_hflip, Batch, LabeledDataset};
use crate::distill::{kd_logit_loss, mgd_stage_loss, mimic_loss, total_loss, GenerativeBlock, Reduction};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelInstance};
use crate::optim::{sgd_step, Parameter, SgdConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{no_grad, softmax_cross_entropy, Tensor};

pub use config::{DistillLoss, LogitKd, TrainConfig};
pub use metrics::{metrics_csv, topk_hits, write_metrics_csv, MetricsRecord, METRICS_HEADER};

/// Per-iteration losses handed to an observer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub iteration: usize,
    /// The task term of the objective (cross-entropy, plus weighted logit
    /// KD when enabled; zero when the task loss is switched off).
    pub loss_original: f64,
    pub loss_dis: f64,
    pub alpha: f64,
    /// Value of the scalar that was back-propagated.
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    /// Trained generative blocks, one per distilled stage (empty for
    /// baseline runs). They are not part of the student checkpoint.
    pub blocks: Vec<GenerativeBlock<f32>>,
    /// Parameters that never received a gradient in some step.
    pub skipped_params: Vec<String>,
}

impl TrainReport {
    pub fn final_val(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == crate::data::Split::Val)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: Option<f64>,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Top-1/top-5 accuracy (percent) and mean cross-entropy over a split.
/// The model must be in eval mode.
pub fn evaluate(model: &ModelInstance<f32>, ds: &LabeledDataset, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    if model.mode() != Mode::Eval {
        return Err(Error::invalid("evaluate", "model must be in eval mode"));
    }
    let k = model.config().num_classes;
    let (mut hit1, mut hit5, mut loss) = (0usize, 0usize, 0.0f64);
    no_grad(|| -> Result<()> {
        for batch in ds.batches(batch_size, None, 0)? {
            let logits = model.forward(&batch.images)?;
            loss += softmax_cross_entropy(&logits, &batch.labels)?.item() as f64 * batch.len() as f64;
            let data = logits.data();
            for (row, &y) in data.chunks_exact(k).zip(&batch.labels) {
                hit1 += usize::from(topk_hits(row, y, 1));
                hit5 += usize::from(topk_hits(row, y, 5));
            }
        }
        Ok(())
    })?;
    let n = ds.len() as f64;
    Ok(EvalResult {
        top1: 100.0 * hit1 as f64 / n,
        top5: (k >= 5).then(|| 100.0 * hit5 as f64 / n),
        loss: loss / n,
    })
}

/// Batch mean of `Σ (T − f_align(S))²` on the last stage, no masking.
/// Both models are run in eval mode.
pub fn track_feature_difference(
    teacher: &ModelInstance<f32>,
    student: &ModelInstance<f32>,
    stage: &str,
    block: &GenerativeBlock<f32>,
    probe: &Tensor<f32>,
) -> Result<f64> {
    if teacher.mode() != Mode::Eval || student.mode() != Mode::Eval {
        return Err(Error::invalid("track_feature_difference", "both models must be in eval mode"));
    }
    no_grad(|| {
        let t = teacher.forward_with_features(probe)?;
        let s = student.forward_with_features(probe)?;
        let missing = || Error::config("stages", format!("unknown stage `{stage}`"));
        let tf = t.features.get(stage).ok_or_else(missing)?;
        let sf = s.features.get(stage).ok_or_else(missing)?;
        let d = mimic_loss(sf, tf, &block.align, Reduction::Sum)?.item() as f64;
        Ok(d / probe.shape()[0] as f64)
    })
}

/// Cross-entropy training of `model` on `train`.
pub fn train_baseline(
    model: &mut ModelInstance<f32>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_baseline_observed(model, train, val, cfg, &mut |_| {})
}

pub fn train_baseline_observed(
    model: &mut ModelInstance<f32>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    Run::new(model, None, train, val, cfg)?.execute(observer)
}

/// Trains `student` with `L_original + alpha * L_dis` against a frozen
/// teacher.
pub fn train_distill(
    teacher: &ModelInstance<f32>,
    student: &mut ModelInstance<f32>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_distill_observed(teacher, student, train, val, cfg, &mut |_| {})
}

pub fn train_distill_observed(
    teacher: &ModelInstance<f32>,
    student: &mut ModelInstance<f32>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if !teacher.is_frozen() {
        return Err(Error::invalid("train_distill", "teacher must be frozen before distillation"));
    }
    if cfg.stages.is_empty() {
        return Err(Error::config("stages", "distillation needs at least one stage"));
    }
    let mut blocks = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        let unknown = |who: &str| Error::config("stages", format!("unknown stage `{stage}` in {who} model"));
        let (sc, sh, sw) = student.config().stage_shape(stage).ok_or_else(|| unknown("student"))?;
        let (tc, th, tw) = teacher.config().stage_shape(stage).ok_or_else(|| unknown("teacher"))?;
        if (sh, sw) != (th, tw) {
            return Err(Error::config(
                "stages",
                format!("stage `{stage}` is {sh}×{sw} in the student but {th}×{tw} in the teacher; only channels can be aligned"),
            ));
        }
        blocks.push(GenerativeBlock::new(stage, sc, tc, cfg.projector, cfg.seed, i)?);
    }
    if teacher.config().input_size != student.config().input_size
        || teacher.config().in_channels != student.config().in_channels
    {
        return Err(Error::config("teacher_config", "teacher and student must take the same input geometry"));
    }
    Run::new(student, Some(Distill { teacher, blocks }), train, val, cfg)?.execute(observer)
}

struct Distill<'a> {
    teacher: &'a ModelInstance<f32>,
    blocks: Vec<GenerativeBlock<f32>>,
}

struct Run<'a> {
    student: &'a mut ModelInstance<f32>,
    distill: Option<Distill<'a>>,
    train: &'a LabeledDataset,
    val: &'a LabeledDataset,
    cfg: &'a TrainConfig,
    probe: Tensor<f32>,
    skipped: Vec<String>,
}

#[derive(Default)]
struct EpochSums {
    n: usize,
    task: f64,
    dis: f64,
    hit1: usize,
    hit5: usize,
}

impl<'a> Run<'a> {
    fn new(
        student: &'a mut ModelInstance<f32>,
        distill: Option<Distill<'a>>,
        train: &'a LabeledDataset,
        val: &'a LabeledDataset,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        for (name, ds) in [("train", train), ("val", val)] {
            if ds.is_empty() {
                return Err(Error::Dataset(format!("{name} split is empty")));
            }
            let c = student.config();
            if (ds.channels, ds.height, ds.width) != (c.in_channels, c.input_size, c.input_size) {
                return Err(Error::Dataset(format!(
                    "{name} images are {}×{}×{} but the model expects {}×{}×{}",
                    ds.channels, ds.height, ds.width, c.in_channels, c.input_size, c.input_size
                )));
            }
            if ds.class_count > c.num_classes {
                return Err(Error::Dataset(format!(
                    "{name} split has {} classes but the model head has {}",
                    ds.class_count, c.num_classes
                )));
            }
        }
        let probe = val.batches(cfg.batch_size, None, 0)?.next().expect("val is non-empty").images;
        Ok(Self {
            student,
            distill,
            train,
            val,
            cfg,
            probe,
            skipped: Vec::new(),
        })
    }

    fn execute(mut self, observer: &mut dyn FnMut(&StepLog)) -> Result<TrainReport> {
        let mut records = vec![self.val_record(0)?];
        let mut iteration = 0usize;
        for epoch in 0..self.cfg.epochs {
            let lr = self.cfg.lr_at(epoch);
            self.student.set_mode(Mode::Train);
            let mut sums = EpochSums::default();
            for batch in self.train.batches(self.cfg.batch_size, Some(self.cfg.seed), epoch)? {
                if self.cfg.hflip {
                    random_hflip(&batch.images, &mut stream_rng(self.cfg.seed, Stream::Augment, &[iteration as u64]))?;
                }
                let log = self.step(&batch, epoch, iteration, lr, &mut sums)?;
                observer(&log);
                iteration += 1;
            }
            let n = sums.n as f64;
            let k = self.student.config().num_classes;
            records.push(MetricsRecord {
                epoch: epoch + 1,
                split: crate::data::Split::Train,
                top1: 100.0 * sums.hit1 as f64 / n,
                top5: (k >= 5).then(|| 100.0 * sums.hit5 as f64 / n),
                loss_task: sums.task / n,
                loss_dis: self.distill.as_ref().map(|_| sums.dis / n),
                feature_diff: None,
            });
            records.push(self.val_record(epoch + 1)?);
        }
        self.student.set_mode(Mode::Eval);
        if let Some(path) = &self.cfg.checkpoint_path {
            self.student.save(path)?;
        }
        self.skipped.sort();
        self.skipped.dedup();
        Ok(TrainReport {
            records,
            blocks: self.distill.map(|d| d.blocks).unwrap_or_default(),
            skipped_params: self.skipped,
        })
    }

    fn mask_rng(&self, stage: usize, iteration: u64) -> crate::rng::StreamRng {
        stream_rng(self.cfg.seed, Stream::Mask, &[self.cfg.mask.seed, stage as u64, iteration])
    }

    /// Distillation loss over the configured stages.
    fn dis_loss(
        &self,
        d: &Distill<'_>,
        student_feats: &crate::models::StageFeatures<f32>,
        teacher_feats: &crate::models::StageFeatures<f32>,
        mask_iteration: u64,
    ) -> Result<Tensor<f32>> {
        let mut total: Option<Tensor<f32>> = None;
        for (i, (stage, block)) in self.cfg.stages.iter().zip(&d.blocks).enumerate() {
            let s = student_feats.get(stage).expect("stage validated");
            let t = teacher_feats.get(stage).expect("stage validated");
            let l = match self.cfg.distill_loss {
                DistillLoss::Mgd => {
                    let mut rng = self.mask_rng(i, mask_iteration);
                    mgd_stage_loss(s, t, block, &self.cfg.mask, &mut rng, self.cfg.reduction)?
                }
                DistillLoss::Mimic => mimic_loss(s, t, &block.align, self.cfg.reduction)?,
            };
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        Ok(total.expect("stages non-empty"))
    }

    fn step(&mut self, batch: &Batch, epoch: usize, iteration: usize, lr: f64, sums: &mut EpochSums) -> Result<StepLog> {
        let cfg = self.cfg;
        let out = self.student.forward_with_features(&batch.images)?;
        let ce = softmax_cross_entropy(&out.logits, &batch.labels)?;
        let mut original = ce.clone();
        let mut loss_dis = None;
        if let Some(d) = &self.distill {
            let t = no_grad(|| d.teacher.forward_with_features(&batch.images))?;
            if let Some(kd) = &cfg.logit_kd {
                let l = kd_logit_loss(&out.logits, &t.logits, kd.temperature)?;
                original = original.add(&l.scale(kd.weight as f32))?;
            }
            loss_dis = Some(self.dis_loss(d, &out.features, &t.features, iteration as u64)?);
        }
        if !cfg.task_loss {
            original = original.scale(0.0);
        }
        let total = match &loss_dis {
            Some(dis) => total_loss(&original, dis, cfg.alpha)?,
            None => original.clone(),
        };
        total.backward()?;

        let sgd = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let mimic = cfg.distill_loss == DistillLoss::Mimic;
        let mut params: Vec<&mut Parameter<f32>> = self.student.parameters_mut();
        if let Some(d) = &mut self.distill {
            for b in &mut d.blocks {
                if mimic {
                    params.extend(b.align.params_mut());
                } else {
                    params.extend(b.params_mut());
                }
            }
        }
        let report = sgd_step(params, &sgd);
        self.skipped.extend(report.skipped);

        let k = self.student.config().num_classes;
        let logits = out.logits.data();
        for (row, &y) in logits.chunks_exact(k).zip(&batch.labels) {
            sums.hit1 += usize::from(topk_hits(row, y, 1));
            sums.hit5 += usize::from(topk_hits(row, y, 5));
        }
        let n = batch.len();
        let ce_v = ce.item() as f64;
        let dis_v = loss_dis.as_ref().map_or(0.0, |t| t.item() as f64);
        sums.n += n;
        sums.task += ce_v * n as f64;
        sums.dis += dis_v * n as f64;
        Ok(StepLog {
            epoch,
            iteration,
            loss_original: original.item() as f64,
            loss_dis: dis_v,
            alpha: if self.distill.is_some() { cfg.alpha } else { 0.0 },
            loss_total: total.item() as f64,
            lr,
        })
    }

    fn val_record(&mut self, epoch: usize) -> Result<MetricsRecord> {
        self.student.set_mode(Mode::Eval);
        let eval = evaluate(self.student, self.val, self.cfg.batch_size)?;
        let (mut loss_dis, mut feature_diff) = (None, None);
        if let Some(d) = &self.distill {
            let mut sum = 0.0;
            no_grad(|| -> Result<()> {
                for (bi, batch) in self.val.batches(self.cfg.batch_size, None, 0)?.enumerate() {
                    let s = self.student.forward_with_features(&batch.images)?;
                    let t = d.teacher.forward_with_features(&batch.images)?;
                    // fixed masks so epochs are comparable
                    sum += self.dis_loss(d, &s.features, &t.features, u64::MAX - bi as u64)?.item() as f64
                        * batch.len() as f64;
                }
                Ok(())
            })?;
            loss_dis = Some(sum / self.val.len() as f64);
            let last = self.cfg.stages.len() - 1;
            feature_diff = Some(track_feature_difference(
                d.teacher,
                self.student,
                &self.cfg.stages[last],
                &d.blocks[last],
                &self.probe,
            )?);
        }
        Ok(MetricsRecord {
            epoch,
            split: crate::data::Split::Val,
            top1: eval.top1,
            top5: eval.top5,
            loss_task: eval.loss,
            loss_dis,
            feature_diff,
        })
    }
}
