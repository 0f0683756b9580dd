//! Criteria 1-3: gradients, loss oracles, mask statistics.

use mgd_core::distill::{
    apply_mask, kd_logit_loss, mgd_loss, mgd_stage_loss, mimic_loss, sample_mask, total_loss, GenerativeBlock, MaskConfig,
    MaskMode, ProjectorSpec, Reduction,
};
use mgd_core::gradcheck::{random_projection, random_tensor, GradCheck};
use mgd_core::models::{BackboneConfig, Mode, ModelInstance};
use mgd_core::tensor::{batch_norm2d, conv2d, global_avg_pool, linear, relu, softmax_cross_entropy, sq_l2_sum};
use mgd_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

/// Block parameters as gradcheck inputs. Biases start at zero, which would
/// put fully masked positions exactly on the ReLU kink; jitter them first.
fn params_of(block: &GenerativeBlock<f64>) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(block.stage.len() as u64);
    block
        .params()
        .map(|p| {
            if p.tensor.rank() == 1 {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            p.tensor.clone()
        })
        .collect()
}

struct Checks {
    worst: f64,
    worst_name: String,
    failures: Vec<String>,
    count: usize,
}

impl Checks {
    fn run(&mut self, name: &str, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
        self.count += 1;
        match GradCheck::default().run(inputs, f) {
            Ok(r) => {
                if r.max_rel_error > self.worst || r.max_rel_error.is_nan() {
                    self.worst = r.max_rel_error;
                    self.worst_name = name.to_string();
                }
                if !r.passed || r.checked == 0 {
                    self.failures.push(format!("{name} (rel {:.2e}, worst {:?})", r.max_rel_error, r.worst));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

fn leaf(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 1.0, true, seed)
}

fn constant(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, 1.0, false, seed)
}

pub fn gradient_integrity() -> Verdict {
    let mut c = Checks {
        worst: 0.0,
        worst_name: String::new(),
        failures: Vec::new(),
        count: 0,
    };
    let (a, b) = (leaf(&[3, 4], 1), leaf(&[3, 4], 2));
    let ab = [a.clone(), b.clone()];
    c.run("add", &ab, |t| random_projection(&t[0].add(&t[1])?, 1));
    c.run("sub", &ab, |t| random_projection(&t[0].sub(&t[1])?, 2));
    c.run("mul", &ab, |t| random_projection(&t[0].mul(&t[1])?, 3));
    let k: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.1).collect();
    c.run("mul_const", &ab[..1], |t| random_projection(&t[0].mul_const(&k)?, 4));
    c.run("scale", &ab[..1], |t| random_projection(&t[0].scale(-1.7), 5));
    c.run("sum", &ab[..1], |t| Ok(t[0].sum().scale(0.5)));
    c.run("mean", &ab[..1], |t| Ok(t[0].mean()));
    c.run("reshape", &ab[..1], |t| random_projection(&t[0].reshape(&[2, 6])?, 6));
    c.run("relu", &ab[..1], |t| random_projection(&relu(&t[0]), 7));

    let lin = [leaf(&[3, 5], 10), leaf(&[4, 5], 11), leaf(&[4], 12)];
    c.run("linear", &lin, |t| random_projection(&linear(&t[0], &t[1], &t[2])?, 8));

    // (n, c, h, w, o, k, stride, pad, bias)
    let geometries = [
        (2, 3, 5, 5, 4, 3, 1, 1, true),
        (1, 2, 6, 6, 3, 3, 2, 1, true),
        (2, 3, 4, 4, 2, 1, 1, 0, false),
        (1, 2, 7, 5, 2, 5, 1, 2, true),
        (1, 1, 6, 6, 2, 3, 2, 0, false),
        (1, 2, 5, 4, 3, 2, 1, 0, true),
    ];
    for (i, &(n, ch, h, w, o, k, s, p, bias)) in geometries.iter().enumerate() {
        let seed = 100 + 10 * i as u64;
        let mut inputs = vec![leaf(&[n, ch, h, w], seed), leaf(&[o, ch, k, k], seed + 1)];
        if bias {
            inputs.push(leaf(&[o], seed + 2));
        }
        c.run(&format!("conv2d k{k} s{s} p{p}"), &inputs, |t| {
            random_projection(&conv2d(&t[0], &t[1], t.get(2), s, p)?, seed)
        });
    }

    let bn = [leaf(&[3, 2, 3, 3], 30), leaf(&[2], 31), leaf(&[2], 32)];
    let (rm, rv) = (constant(&[2], 33), Tensor::new(&[2], vec![0.7, 1.9]).unwrap());
    c.run("batch_norm2d train", &bn, |t| {
        random_projection(&batch_norm2d(&t[0], &t[1], &t[2], &rm, &rv, true, 1e-5, 0.1)?, 9)
    });
    c.run("batch_norm2d eval", &bn, |t| {
        random_projection(&batch_norm2d(&t[0], &t[1], &t[2], &rm, &rv, false, 1e-5, 0.1)?, 10)
    });
    c.run("global_avg_pool", &[leaf(&[2, 3, 3, 2], 40)], |t| random_projection(&global_avg_pool(&t[0])?, 11));
    c.run("softmax_cross_entropy", &[leaf(&[4, 5], 41)], |t| softmax_cross_entropy(&t[0], &[0, 4, 2, 2]));
    c.run("sq_l2_sum", &[leaf(&[2, 3, 2], 42), leaf(&[2, 3, 2], 43)], |t| sq_l2_sum(&t[0], &t[1]));
    let t_logits = constant(&[3, 6], 45);
    c.run("kd_logit_loss", &[leaf(&[3, 6], 44)], |t| kd_logit_loss(&t[0], &t_logits, 4.0));
    c.run("total_loss", &[leaf(&[1], 46), leaf(&[1], 47)], |t| total_loss(&t[0].sum(), &t[1].sum(), 0.3));

    let mut mrng = ChaCha8Rng::seed_from_u64(50);
    for cfg in [MaskConfig::spatial(0.5), MaskConfig::channel(0.5)] {
        let mask = sample_mask(2, 3, 3, 3, &cfg, &mut mrng).unwrap();
        c.run(&format!("apply_mask {:?}", cfg.mode), &[leaf(&[2, 3, 3, 3], 51)], |t| {
            random_projection(&apply_mask(&t[0], &mask)?, 12)
        });
    }

    // composed pipeline: align, mask, generate, reconstruction loss
    let mut case = 0u64;
    for depth in 1..=3 {
        for kernel in [3, 5] {
            for (cfg, red) in [
                (MaskConfig::spatial(0.5), Reduction::Sum),
                (MaskConfig::channel(0.15), Reduction::BatchMean),
            ] {
                case += 1;
                let block = GenerativeBlock::<f64>::new("s", 3, 4, ProjectorSpec { depth, kernel }, case, 0).unwrap();
                let teacher = constant(&[2, 4, 4, 4], 60 + case);
                let mut inputs = vec![leaf(&[2, 3, 4, 4], 80 + case)];
                inputs.extend(params_of(&block));
                c.run(&format!("mgd pipeline depth{depth} kernel{kernel} {:?}", cfg.mode), &inputs, |t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(case);
                    mgd_stage_loss(&t[0], &teacher, &block, &cfg, &mut rng, red)
                });
            }
        }
    }
    let blocks = [
        GenerativeBlock::<f64>::new("a", 2, 3, ProjectorSpec::default(), 7, 0).unwrap(),
        GenerativeBlock::<f64>::new("b", 3, 2, ProjectorSpec::default(), 7, 1).unwrap(),
    ];
    let teachers = [constant(&[2, 3, 4, 4], 90), constant(&[2, 2, 2, 2], 91)];
    let mut inputs = vec![leaf(&[2, 2, 4, 4], 92), leaf(&[2, 3, 2, 2], 93)];
    inputs.extend(blocks.iter().flat_map(params_of));
    c.run("mgd_loss two stages", &inputs, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        mgd_loss(&t[..2], &teachers, &blocks, &MaskConfig::spatial(0.4), &mut rng, Reduction::Sum)
    });
    let align = &blocks[1].align;
    let mut inputs = vec![leaf(&[2, 3, 4, 4], 94)];
    inputs.extend(align.params().map(|p| p.tensor.clone()));
    let teacher = constant(&[2, 2, 4, 4], 95);
    c.run("mimic_loss", &inputs, |t| mimic_loss(&t[0], &teacher, align, Reduction::ElementMean));

    // whole student objective: task loss plus weighted masked generative loss
    let arch = BackboneConfig::parse("basic:2:1x2,1x3d", 2, 4, 3).unwrap();
    let mut model = ModelInstance::<f64>::build(&arch, 1).unwrap();
    model.set_mode(Mode::Train);
    let block = GenerativeBlock::<f64>::new("stage2", 3, 4, ProjectorSpec::default(), 2, 0).unwrap();
    let images = constant(&[3, 2, 4, 4], 97);
    let teacher = constant(&[3, 4, 2, 2], 98);
    let mut inputs: Vec<Tensor<f64>> = model.parameters().iter().map(|p| p.tensor.clone()).collect();
    inputs.extend(params_of(&block));
    c.run("student objective", &inputs, |_| {
        let out = model.forward_with_features(&images)?;
        let task = softmax_cross_entropy(&out.logits, &[0, 1, 2])?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = out.features.get("stage2").expect("stage2");
        let dis = mgd_stage_loss(feat, &teacher, &block, &MaskConfig::spatial(0.5), &mut rng, Reduction::Sum)?;
        total_loss(&task, &dis, 0.05)
    });

    Verdict {
        pass: c.failures.is_empty(),
        detail: if c.failures.is_empty() {
            format!("{} checks, worst rel error {:.2e} ({})", c.count, c.worst, c.worst_name)
        } else {
            format!("{} of {} checks failed: {}", c.failures.len(), c.count, c.failures.join("; "))
        },
    }
}

/// Stride-1 cross-correlation with zero padding, plain loops.
fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], o: usize, k: usize, bias: &[f64]) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                    * x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv_of(conv: &mgd_core::models::layers::Conv2d<f64>, x: &[f64], dims: (usize, usize, usize, usize)) -> Vec<f64> {
    let o = conv.out_channels();
    let bias = conv.bias.as_ref().map(|b| b.tensor.to_vec()).unwrap_or_else(|| vec![0.0; o]);
    naive_conv(x, dims, &conv.weight.tensor.to_vec(), o, conv.kernel(), &bias)
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum()
}

struct StageCase {
    block: GenerativeBlock<f64>,
    student: Tensor<f64>,
    teacher: Tensor<f64>,
    dims: (usize, usize, usize, usize),
}

/// Oracle of the masked reconstruction loss of one stage, drawing the mask
/// from `rng` in (sample, row, column) or (sample, channel) order.
fn mgd_oracle(s: &StageCase, mode: MaskMode, ratio: f64, rng: &mut ChaCha8Rng) -> f64 {
    let (n, _, h, w) = s.dims;
    let ct = s.block.teacher_channels();
    let mut x = conv_of(&s.block.align, &s.student.to_vec(), s.dims);
    match mode {
        MaskMode::Spatial => {
            for b in 0..n {
                for p in 0..h * w {
                    if rng.random::<f64>() < ratio {
                        for k in 0..ct {
                            x[(b * ct + k) * h * w + p] = 0.0;
                        }
                    }
                }
            }
        }
        MaskMode::Channel => {
            for b in 0..n {
                for k in 0..ct {
                    if rng.random::<f64>() < ratio {
                        x[(b * ct + k) * h * w..(b * ct + k + 1) * h * w].fill(0.0);
                    }
                }
            }
        }
    }
    for (i, conv) in s.block.layers.iter().enumerate() {
        if i > 0 {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = conv_of(conv, &x, (n, ct, h, w));
    }
    sq_diff(&x, &s.teacher.to_vec())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    for shape in 0..50u64 {
        let n = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let stages = rng.random_range(1..=2);
        let mode = if rng.random_bool(0.5) { MaskMode::Spatial } else { MaskMode::Channel };
        let ratio = rng.random_range(0.0..0.9);
        let cases: Vec<StageCase> = (0..stages)
            .map(|si| {
                let (cs, ct) = (rng.random_range(1..=5), rng.random_range(1..=6));
                let spec = ProjectorSpec {
                    depth: rng.random_range(1..=3),
                    kernel: if rng.random_bool(0.5) { 3 } else { 5 },
                };
                let block = GenerativeBlock::new(&format!("s{si}"), cs, ct, spec, shape, si).unwrap();
                // non-zero biases so the oracle sees them
                for p in block.params() {
                    if p.tensor.rank() == 1 {
                        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                    }
                }
                let seed = shape * 16 + si as u64;
                StageCase {
                    student: random_tensor(&[n, cs, h, w], 2.0, false, seed),
                    teacher: random_tensor(&[n, ct, h, w], 2.0, false, seed + 1000),
                    block,
                    dims: (n, cs, h, w),
                }
            })
            .collect();
        let cfg = MaskConfig { mode, ratio, seed: 0 };
        let students: Vec<_> = cases.iter().map(|c| c.student.clone()).collect();
        let teachers: Vec<_> = cases.iter().map(|c| c.teacher.clone()).collect();
        let blocks: Vec<_> = cases.iter().map(|c| c.block.clone()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(shape);
        let mut r2 = r1.clone();
        let got = mgd_loss(&students, &teachers, &blocks, &cfg, &mut r1, Reduction::Sum).unwrap().item();
        let want: f64 = cases.iter().map(|c| mgd_oracle(c, mode, ratio, &mut r2)).sum();
        worst = worst.max(rel(got, want));
        if rel(got, want) > 1e-5 {
            problems.push(format!("mgd shape {shape}: {got} vs {want}"));
        }
        let mean = mgd_loss(&students, &teachers, &blocks, &cfg, &mut ChaCha8Rng::seed_from_u64(shape), Reduction::BatchMean)
            .unwrap()
            .item();
        if rel(mean, want / n as f64) > 1e-5 {
            problems.push(format!("mgd batch mean shape {shape}: {mean} vs {}", want / n as f64));
        }

        for c in &cases {
            let got = mimic_loss(&c.student, &c.teacher, &c.block.align, Reduction::Sum).unwrap().item();
            let want = sq_diff(&conv_of(&c.block.align, &c.student.to_vec(), c.dims), &c.teacher.to_vec());
            worst = worst.max(rel(got, want));
            if rel(got, want) > 1e-5 {
                problems.push(format!("mimic shape {shape}: {got} vs {want}"));
            }
        }
    }

    // with nothing masked and an identity block the two losses coincide
    let mut exact = 0;
    for (i, &(n, ch, h, w)) in [(1, 1, 1, 1), (2, 3, 4, 4), (3, 5, 2, 7), (4, 8, 6, 6)].iter().enumerate() {
        let block = GenerativeBlock::<f64>::identity("s", ch);
        let s = random_tensor(&[n, ch, h, w], 3.0, false, 500 + i as u64);
        let t = random_tensor(&[n, ch, h, w], 3.0, false, 600 + i as u64);
        for mode in [MaskMode::Spatial, MaskMode::Channel] {
            for red in [Reduction::Sum, Reduction::BatchMean, Reduction::ElementMean] {
                let cfg = MaskConfig { mode, ratio: 0.0, seed: 0 };
                let m = mgd_stage_loss(&s, &t, &block, &cfg, &mut ChaCha8Rng::seed_from_u64(1), red).unwrap().item();
                let d = mimic_loss(&s, &t, &block.align, red).unwrap().item();
                if m.to_bits() == d.to_bits() {
                    exact += 1;
                } else {
                    problems.push(format!("identity {n}x{ch}x{h}x{w} {mode:?} {red:?}: {m} vs {d}"));
                }
            }
        }
        let b32 = GenerativeBlock::<f32>::identity("s", ch);
        let (s32, t32) = (s.cast::<f32>(), t.cast::<f32>());
        let m = mgd_stage_loss(&s32, &t32, &b32, &MaskConfig::spatial(0.0), &mut ChaCha8Rng::seed_from_u64(1), Reduction::Sum)
            .unwrap()
            .item();
        let d = mimic_loss(&s32, &t32, &b32.align, Reduction::Sum).unwrap().item();
        if m.to_bits() == d.to_bits() {
            exact += 1;
        } else {
            problems.push(format!("identity f32 {n}x{ch}x{h}x{w}: {m} vs {d}"));
        }
    }
    Verdict {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("50 random shapes, worst rel error {worst:.2e}; {exact} identity cases bit-exact")
        } else {
            problems.join("; ")
        },
    }
}

pub fn mask_statistics() -> Verdict {
    const DRAWS: usize = 10_000;
    let (n, c, h, w) = (2, 6, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut notes = Vec::new();
    let mut problems = Vec::new();
    for mode in [MaskMode::Spatial, MaskMode::Channel] {
        for ratio in [0.25, 0.5, 0.75] {
            let cfg = MaskConfig { mode, ratio, seed: 0 };
            let mut dropped = 0usize;
            let mut entries = 0usize;
            let mut shape_ok = true;
            for _ in 0..DRAWS {
                let m = sample_mask(n, c, h, w, &cfg, &mut rng).unwrap();
                entries += m.bits.len();
                dropped += m.bits.iter().filter(|&&b| b == 0).count();
                let e: Vec<f64> = m.expand();
                shape_ok &= broadcast_ok(&e, mode, (n, c, h, w));
            }
            let expect = entries as f64 * ratio;
            let sigma = (entries as f64 * ratio * (1.0 - ratio)).sqrt();
            let z = (dropped as f64 - expect) / sigma;
            notes.push(format!("{mode:?} λ={ratio}: z={z:+.2}"));
            if z.abs() > 4.0 {
                problems.push(format!("{mode:?} λ={ratio}: {dropped} dropped of {entries}, z={z:.2}"));
            }
            if !shape_ok {
                problems.push(format!("{mode:?} λ={ratio}: mask not constant along the broadcast axis"));
            }
        }
        let cfg = MaskConfig { mode, ratio: 0.0, seed: 0 };
        let any = (0..DRAWS).any(|_| sample_mask(n, c, h, w, &cfg, &mut rng).unwrap().bits.iter().any(|&b| b == 0));
        if any {
            problems.push(format!("{mode:?} λ=0 dropped an entry"));
        }
    }
    Verdict {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{DRAWS} draws each; {}; λ=0 keeps everything", notes.join(", "))
        } else {
            problems.join("; ")
        },
    }
}

fn broadcast_ok(e: &[f64], mode: MaskMode, (n, c, h, w): (usize, usize, usize, usize)) -> bool {
    let at = |b: usize, k: usize, p: usize| e[(b * c + k) * h * w + p];
    (0..n).all(|b| match mode {
        MaskMode::Spatial => (0..h * w).all(|p| (1..c).all(|k| at(b, k, p) == at(b, 0, p))),
        MaskMode::Channel => (0..c).all(|k| (1..h * w).all(|p| at(b, k, p) == at(b, k, 0))),
    })
}
