use rand::Rng;

use super::block::GenerativeBlock;
use super::mask::{apply_mask, sample_mask, MaskConfig};
use crate::error::{Error, Result};
use crate::models::layers::Conv2d;
use crate::tensor::loss::softmax_rows;
use crate::tensor::{dims4, sq_l2_sum, Scalar, Tensor};

/// How a squared-error feature loss is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Raw sum over batch, channels and positions.
    #[default]
    Sum,
    /// Sum divided by the batch size.
    BatchMean,
    /// Mean over every element.
    ElementMean,
}

impl Reduction {
    fn apply<S: Scalar>(self, sum: Tensor<S>, reference: &Tensor<S>) -> Tensor<S> {
        let denom = match self {
            Reduction::Sum => return sum,
            Reduction::BatchMean => reference.shape()[0],
            Reduction::ElementMean => reference.numel(),
        };
        sum.scale(S::one() / S::from_usize(denom.max(1)).unwrap_or_else(S::one))
    }
}

fn check_stage_pair<S: Scalar>(
    op: &'static str,
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    align: &Conv2d<S>,
) -> Result<()> {
    let (sn, sc, sh, sw) = dims4(student, op)?;
    let (tn, tc, th, tw) = dims4(teacher, op)?;
    if sn != tn || (sh, sw) != (th, tw) {
        return Err(Error::shape(
            op,
            format!(
                "student feature {:?} and teacher feature {:?} differ in batch or spatial size (only channels are aligned)",
                student.shape(),
                teacher.shape()
            ),
        ));
    }
    if align.in_channels() != sc || align.out_channels() != tc {
        return Err(Error::shape(
            op,
            format!(
                "adaptation layer maps {} -> {} channels, features have {sc} -> {tc}",
                align.in_channels(),
                align.out_channels()
            ),
        ));
    }
    Ok(())
}

/// Masked generative loss of one stage:
/// `Σ (T − G(f_align(S) · M))²` with a freshly drawn mask. The teacher
/// feature is treated as a constant.
pub fn mgd_stage_loss<S: Scalar, R: Rng + ?Sized>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    block: &GenerativeBlock<S>,
    cfg: &MaskConfig,
    rng: &mut R,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    check_stage_pair("mgd_loss", student, teacher, &block.align)?;
    let aligned = block.align(student)?;
    let (n, c, h, w) = dims4(&aligned, "mgd_loss")?;
    let mask = sample_mask(n, c, h, w, cfg, rng)?;
    let generated = block.generate(&apply_mask(&aligned, &mask)?)?;
    let sum = sq_l2_sum(&generated, &teacher.detach())?;
    Ok(reduction.apply(sum, teacher))
}

/// Masked generative loss summed over stages; stage `l` of the students is
/// paired with stage `l` of the teacher and `blocks[l]`, with one mask per
/// stage drawn in order from `rng`.
pub fn mgd_loss<S: Scalar, R: Rng + ?Sized>(
    student_feats: &[Tensor<S>],
    teacher_feats: &[Tensor<S>],
    blocks: &[GenerativeBlock<S>],
    cfg: &MaskConfig,
    rng: &mut R,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    let l = student_feats.len();
    if l == 0 || teacher_feats.len() != l || blocks.len() != l {
        return Err(Error::shape(
            "mgd_loss",
            format!(
                "need equal non-empty stage lists, got {l} student, {} teacher, {} blocks",
                teacher_feats.len(),
                blocks.len()
            ),
        ));
    }
    let mut total: Option<Tensor<S>> = None;
    for ((s, t), b) in student_feats.iter().zip(teacher_feats).zip(blocks) {
        let stage = mgd_stage_loss(s, t, b, cfg, rng, reduction)?;
        total = Some(match total {
            Some(acc) => acc.add(&stage)?,
            None => stage,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Direct feature mimicking: `Σ (T − f_align(S))²`.
pub fn mimic_loss<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    align: &Conv2d<S>,
    reduction: Reduction,
) -> Result<Tensor<S>> {
    check_stage_pair("mimic_loss", student, teacher, align)?;
    let sum = sq_l2_sum(&align.forward(student)?, &teacher.detach())?;
    Ok(reduction.apply(sum, teacher))
}

/// `l_original + alpha * l_dis`.
pub fn total_loss<S: Scalar>(l_original: &Tensor<S>, l_dis: &Tensor<S>, alpha: f64) -> Result<Tensor<S>> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("total_loss", format!("alpha must be ≥ 0, got {alpha}")));
    }
    if l_original.numel() != 1 || l_dis.numel() != 1 {
        return Err(Error::shape("total_loss", "both losses must be scalars"));
    }
    l_original.reshape(&[])?.add(&l_dis.reshape(&[])?.scale(S::from_f64_lossy(alpha)))
}

/// Temperature-softened distillation on logits:
/// `T² · KL(softmax(t / T) ‖ softmax(s / T))`, averaged over the batch.
/// Only the student logits receive a gradient.
pub fn kd_logit_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("kd_logit_loss", format!("temperature must be > 0, got {temperature}")));
    }
    let (n, k) = match *student.shape() {
        [n, k] if n > 0 => (n, k),
        ref s => return Err(Error::shape("kd_logit_loss", format!("logits must be non-empty N×K, got {s:?}"))),
    };
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "kd_logit_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    let scaled = |t: &Tensor<S>| -> Vec<f64> { t.data().iter().map(|v| v.as_f64() / temperature).collect() };
    let ps = softmax_rows(&scaled(student), k);
    let pt = softmax_rows(&scaled(teacher), k);
    let kl: f64 = pt
        .iter()
        .zip(&ps)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.max(f64::MIN_POSITIVE).ln()))
        .sum();
    let loss = temperature * temperature * kl / n as f64;
    Ok(Tensor::from_op(Vec::new(), vec![S::from_f64_lossy(loss)], "kd_logit_loss", &[student], move |g, _| {
        let scale = g[0].as_f64() * temperature / n as f64;
        vec![Some(ps.iter().zip(&pt).map(|(&q, &p)| S::from_f64_lossy(scale * (q - p))).collect())]
    }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::distill::{MaskMode, ProjectorSpec};
    use crate::gradcheck::{random_tensor, GradCheck};

    #[test]
    fn perfect_reconstruction_is_zero() {
        let b = GenerativeBlock::<f64>::identity("s", 2);
        let s = random_tensor(&[2, 2, 3, 3], 1.0, false, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = mgd_stage_loss(&s, &s, &b, &MaskConfig::spatial(0.0), &mut rng, Reduction::Sum).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn single_pixel_arithmetic() {
        // Block output 0 (all-zero weights), teacher value 2 -> loss 4.
        let mut b = GenerativeBlock::<f64>::new("s", 1, 1, ProjectorSpec::default(), 0, 0).unwrap();
        for p in b.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let s = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let t = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = mgd_loss(&[s], &[t], &[b], &MaskConfig::spatial(0.5), &mut rng, Reduction::Sum).unwrap();
        assert_eq!(l.item(), 4.0);
    }

    #[test]
    fn rejects_mismatched_stage_lists_and_spatial_sizes() {
        let b = GenerativeBlock::<f64>::new("s", 2, 3, ProjectorSpec::default(), 0, 0).unwrap();
        let s = random_tensor(&[1, 2, 4, 4], 1.0, false, 1);
        let t = random_tensor(&[1, 3, 2, 2], 1.0, false, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MaskConfig::spatial(0.5);
        assert!(mgd_loss(&[s.clone()], &[t.clone()], &[b.clone()], &cfg, &mut rng, Reduction::Sum).is_err());
        assert!(mgd_loss::<f64, _>(&[], &[], &[], &cfg, &mut rng, Reduction::Sum).is_err());
        let t_ok = random_tensor(&[1, 3, 4, 4], 1.0, false, 3);
        assert!(mgd_loss(&[s.clone(), s.clone()], &[t_ok.clone()], &[b.clone()], &cfg, &mut rng, Reduction::Sum).is_err());
        assert!(mimic_loss(&s, &t, &b.align, Reduction::Sum).is_err());
        assert!(mimic_loss(&s, &t_ok, &b.align, Reduction::Sum).is_ok());
    }

    #[test]
    fn ratio_zero_identity_block_equals_mimic_exactly() {
        let b = GenerativeBlock::<f64>::identity("s", 3);
        let s = random_tensor(&[2, 3, 4, 4], 1.0, false, 4);
        let t = random_tensor(&[2, 3, 4, 4], 1.0, false, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for reduction in [Reduction::Sum, Reduction::BatchMean, Reduction::ElementMean] {
            let m = mgd_stage_loss(&s, &t, &b, &MaskConfig::spatial(0.0), &mut rng, reduction).unwrap();
            let d = mimic_loss(&s, &t, &b.align, reduction).unwrap();
            assert_eq!(m.item(), d.item());
        }
    }

    #[test]
    fn teacher_gets_no_gradient() {
        let b = GenerativeBlock::<f64>::new("s", 2, 2, ProjectorSpec::default(), 0, 0).unwrap();
        let s = random_tensor(&[1, 2, 3, 3], 1.0, true, 6);
        let t = random_tensor(&[1, 2, 3, 3], 1.0, true, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        mgd_stage_loss(&s, &t, &b, &MaskConfig::spatial(0.5), &mut rng, Reduction::Sum)
            .unwrap()
            .backward()
            .unwrap();
        assert!(t.grad().is_none());
        assert!(s.grad().is_some());
        assert!(b.params().all(|p| p.tensor.grad().is_some()));
    }

    #[test]
    fn masked_pixels_get_no_gradient_through_pointwise_block() {
        // A 1-layer block with 1x1 kernel has no spatial receptive field,
        // so dropped positions cannot influence the loss.
        let mut b = GenerativeBlock::<f64>::new("s", 2, 3, ProjectorSpec { depth: 1, kernel: 3 }, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.layers[0] = Conv2d::new("p", 3, 3, 1, 1, 0, true, &mut rng);
        let s = random_tensor(&[2, 2, 4, 4], 1.0, true, 8);
        let t = random_tensor(&[2, 3, 4, 4], 1.0, false, 9);
        let cfg = MaskConfig::spatial(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        mgd_stage_loss(&s, &t, &b, &cfg, &mut rng, Reduction::Sum).unwrap().backward().unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(10);
        let mask = sample_mask(2, 3, 4, 4, &cfg, &mut replay).unwrap();
        let g = s.grad().unwrap();
        let mut dropped = 0;
        for n in 0..2 {
            for c in 0..2 {
                for p in 0..16 {
                    if mask.bits[n * 16 + p] == 0 {
                        dropped += 1;
                        assert_eq!(g[(n * 2 + c) * 16 + p], 0.0);
                    } else {
                        assert_ne!(g[(n * 2 + c) * 16 + p], 0.0);
                    }
                }
            }
        }
        assert!(dropped > 0);
    }

    #[test]
    fn channel_mode_masks_whole_channels() {
        let b = GenerativeBlock::<f64>::identity("s", 4);
        let s = random_tensor(&[1, 4, 3, 3], 1.0, false, 11);
        let zero = Tensor::<f64>::zeros(&[1, 4, 3, 3]);
        let cfg = MaskConfig {
            mode: MaskMode::Channel,
            ratio: 0.5,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // loss vs zero teacher = energy of the kept channels
        let l = mgd_stage_loss(&s, &zero, &b, &cfg, &mut rng, Reduction::Sum).unwrap().item();
        let mut replay = ChaCha8Rng::seed_from_u64(12);
        let mask = sample_mask(1, 4, 3, 3, &cfg, &mut replay).unwrap();
        let sd = s.to_vec();
        let expect: f64 = (0..4)
            .filter(|&c| mask.bits[c] == 1)
            .map(|c| sd[c * 9..(c + 1) * 9].iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let one = Tensor::<f64>::scalar(1.0);
        let dis = Tensor::<f64>::scalar(100.0);
        assert_eq!(total_loss(&one, &dis, 0.0).unwrap().item(), 1.0);
        assert!((total_loss(&one, &dis, 7e-5).unwrap().item() - 1.007).abs() < 1e-12);
        let a = total_loss(&one, &Tensor::scalar(3.0), 0.5).unwrap().item();
        let b = total_loss(&one, &Tensor::scalar(6.0), 0.5).unwrap().item();
        assert!(((b - 1.0) - 2.0 * (a - 1.0)).abs() < 1e-12);
        assert!(total_loss(&one, &dis, -1.0).is_err());
    }

    /// Softmax then KL with plain loops.
    fn naive_kd(s: &[f64], t: &[f64], k: usize, temp: f64) -> f64 {
        let soft = |row: &[f64]| {
            let e: Vec<f64> = row.iter().map(|v| (v / temp).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let mut total = 0.0;
        for (rs, rt) in s.chunks(k).zip(t.chunks(k)) {
            let (ps, pt) = (soft(rs), soft(rt));
            for j in 0..k {
                total += pt[j] * (pt[j] / ps[j]).ln();
            }
        }
        temp * temp * total / (s.len() / k) as f64
    }

    #[test]
    fn kd_logit_loss_cases() {
        let s = random_tensor(&[4, 6], 3.0, true, 20);
        let t = random_tensor(&[4, 6], 3.0, false, 21);
        assert!(kd_logit_loss(&s, &s.detach(), 2.0).unwrap().item().abs() < 1e-12);
        for temp in [0.5, 1.0, 4.0] {
            let l = kd_logit_loss(&s, &t, temp).unwrap().item();
            assert!(l >= 0.0);
            assert!((l - naive_kd(&s.to_vec(), &t.to_vec(), 6, temp)).abs() < 1e-6);
        }
        assert!(kd_logit_loss(&s, &t, 0.0).is_err());
        assert!(kd_logit_loss(&s, &random_tensor(&[4, 5], 1.0, false, 0), 1.0).is_err());
        let report = GradCheck::default().run(&[s], |x| kd_logit_loss(&x[0], &t, 3.0)).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
