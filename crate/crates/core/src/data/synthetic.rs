use rand::Rng;
use rand_distr::StandardNormal;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream, StreamRng};

/// Procedural dataset: every class owns a few colored Gaussian blobs;
/// samples jitter blob positions and amplitudes, add class-independent
/// distractor blobs and pixel noise, all scaled by `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub blobs_per_class: usize,
    pub distractors: usize,
    /// 0 gives every sample its class prototype exactly.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size,
            channels: 3,
            blobs_per_class: 3,
            distractors: 2,
            noise: 0.3,
            seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: Vec<f64>,
}

fn random_blob(rng: &mut StreamRng, size: usize, channels: usize) -> Blob {
    let s = size as f64;
    Blob {
        cx: rng.random_range(0.15 * s..0.85 * s),
        cy: rng.random_range(0.15 * s..0.85 * s),
        sigma: rng.random_range(0.08 * s..0.2 * s),
        color: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn paint(img: &mut [f64], blob: &Blob, amp: f64, size: usize) {
    let plane = size * size;
    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - blob.cx, y as f64 - blob.cy);
            let g = amp * (-(dx * dx + dy * dy) * inv).exp();
            for (c, col) in blob.color.iter().enumerate() {
                img[c * plane + y * size + x] += g * col;
            }
        }
    }
}

/// Builds one split. Both splits share the class prototypes (they depend
/// only on `spec.seed`) but draw disjoint sample streams. Samples cycle
/// through the classes, so every prefix is class-balanced.
pub fn make_synthetic(spec: &SyntheticSpec, split: Split) -> Result<LabeledDataset> {
    if spec.classes < 2 {
        return Err(Error::config("classes", format!("need at least 2, got {}", spec.classes)));
    }
    if spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("size", "image size and channels must be positive"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise", format!("must be ≥ 0, got {}", spec.noise)));
    }
    let (size, ch) = (spec.size, spec.channels);
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|k| {
            let mut rng = stream_rng(spec.seed, Stream::Data, &[u64::MAX, k as u64]);
            (0..spec.blobs_per_class).map(|_| random_blob(&mut rng, size, ch)).collect()
        })
        .collect();
    let split_id = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    let per = ch * size * size;
    let n = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let mut img = vec![0.0f64; per];
    for i in 0..spec.per_class {
        for (k, proto) in prototypes.iter().enumerate() {
            let mut rng = stream_rng(spec.seed, Stream::Data, &[split_id, k as u64, i as u64]);
            img.iter_mut().for_each(|v| *v = 0.0);
            let jitter = spec.noise * 0.1 * size as f64;
            for blob in proto {
                let mut b = blob.clone();
                let (jx, jy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                b.cx += jitter * jx;
                b.cy += jitter * jy;
                let a: f64 = rng.sample(StandardNormal);
                paint(&mut img, &b, 1.0 + 0.3 * spec.noise * a, size);
            }
            if spec.noise > 0.0 {
                for _ in 0..spec.distractors {
                    let d = random_blob(&mut rng, size, ch);
                    paint(&mut img, &d, spec.noise, size);
                }
                for v in img.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += spec.noise * e;
                }
            }
            images.extend(img.iter().map(|&v| v as f32));
            labels.push(k);
        }
    }
    LabeledDataset::new(images, (ch, size, size), labels, spec.classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
    }

    fn nearest_centroid_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
        let per = train.image_len();
        let mut centroids = vec![vec![0.0f64; per]; train.class_count];
        let mut counts = vec![0usize; train.class_count];
        for i in 0..train.len() {
            let k = train.labels[i];
            counts[k] += 1;
            for (c, &v) in centroids[k].iter_mut().zip(train.image(i)) {
                *c += v as f64;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let best = (0..test.class_count)
                    .min_by(|&a, &b| sq_dist(test.image(i), &centroids[a]).total_cmp(&sq_dist(test.image(i), &centroids[b])))
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new(4, 5, 8, 11);
        let a = make_synthetic(&spec, Split::Train).unwrap();
        assert_eq!(a, make_synthetic(&spec, Split::Train).unwrap());
        assert_ne!(a.images, make_synthetic(&SyntheticSpec { seed: 12, ..spec.clone() }, Split::Train).unwrap().images);
        assert_ne!(a.images, make_synthetic(&spec, Split::Val).unwrap().images);
    }

    #[test]
    fn labels_exactly_uniform() {
        let ds = make_synthetic(&SyntheticSpec::new(5, 7, 6, 0), Split::Train).unwrap();
        for k in 0..5 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 7);
        }
        assert_eq!(&ds.labels[..5], &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_noise_is_centroid_separable() {
        let spec = SyntheticSpec::new(6, 10, 12, 3).with_noise(0.0);
        let train = make_synthetic(&spec, Split::Train).unwrap();
        let val = make_synthetic(&spec, Split::Val).unwrap();
        assert_eq!(nearest_centroid_accuracy(&train, &val), 1.0);
    }

    #[test]
    fn rejects_single_class() {
        assert!(make_synthetic(&SyntheticSpec::new(1, 3, 4, 0), Split::Train).is_err());
    }
}
