use crate::error::{Error, Result};
use crate::models::layers::Conv2d;
use crate::optim::Parameter;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{dims4, relu, Scalar, Tensor};

/// Shape of the generative block: number of convolutions and their kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub depth: usize,
    pub kernel: usize,
}

impl Default for ProjectorSpec {
    /// conv3×3 → ReLU → conv3×3.
    fn default() -> Self {
        Self { depth: 2, kernel: 3 }
    }
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.depth) {
            return Err(Error::config("projector_depth", format!("{} not in 1..=3", self.depth)));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(Error::config("projector_kernel", format!("{} is not 3 or 5", self.kernel)));
        }
        Ok(())
    }
}

/// Per-stage adaptation layer (1×1 conv, student → teacher channels) and
/// generative stack (k×k convs with a ReLU between consecutive convs,
/// padding `k / 2` so the spatial size is preserved).
#[derive(Debug, Clone)]
pub struct GenerativeBlock<S: Scalar = f32> {
    pub stage: String,
    pub align: Conv2d<S>,
    pub layers: Vec<Conv2d<S>>,
    pub spec: ProjectorSpec,
}

impl<S: Scalar> GenerativeBlock<S> {
    pub fn new(
        stage: &str,
        student_channels: usize,
        teacher_channels: usize,
        spec: ProjectorSpec,
        seed: u64,
        stage_index: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if student_channels == 0 || teacher_channels == 0 {
            return Err(Error::invalid("GenerativeBlock::new", "channel counts must be ≥ 1"));
        }
        let mut rng = stream_rng(seed, Stream::BlockInit, &[stage_index as u64]);
        let prefix = format!("mgd.{stage}");
        let align = Conv2d::new(&format!("{prefix}.align"), student_channels, teacher_channels, 1, 1, 0, true, &mut rng);
        let layers = (0..spec.depth)
            .map(|i| {
                Conv2d::new(
                    &format!("{prefix}.generation.{i}"),
                    teacher_channels,
                    teacher_channels,
                    spec.kernel,
                    1,
                    spec.kernel / 2,
                    true,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            stage: stage.to_string(),
            align,
            layers,
            spec,
        })
    }

    /// A block whose align and generation are both exact identities
    /// (identity 1×1 align, one centered-delta 3×3 conv, zero biases).
    pub fn identity(stage: &str, channels: usize) -> Self {
        let b = Self::new(stage, channels, channels, ProjectorSpec { depth: 1, kernel: 3 }, 0, 0)
            .expect("valid identity spec");
        let mut eye = vec![S::zero(); channels * channels];
        let mut delta = vec![S::zero(); channels * channels * 9];
        for c in 0..channels {
            eye[c * channels + c] = S::one();
            delta[(c * channels + c) * 9 + 4] = S::one();
        }
        *b.align.weight.tensor.data_mut() = eye;
        *b.layers[0].weight.tensor.data_mut() = delta;
        b
    }

    pub fn student_channels(&self) -> usize {
        self.align.in_channels()
    }

    pub fn teacher_channels(&self) -> usize {
        self.align.out_channels()
    }

    /// `f_align(student)`.
    pub fn align(&self, student: &Tensor<S>) -> Result<Tensor<S>> {
        let (_, c, _, _) = dims4(student, "GenerativeBlock::align")?;
        if c != self.student_channels() {
            return Err(Error::shape(
                "GenerativeBlock::align",
                format!("student feature has {c} channels, block expects {}", self.student_channels()),
            ));
        }
        self.align.forward(student)
    }

    /// The generative stack applied to an already aligned, masked feature.
    pub fn generate(&self, masked_aligned: &Tensor<S>) -> Result<Tensor<S>> {
        let (_, c, _, _) = dims4(masked_aligned, "GenerativeBlock::generate")?;
        if c != self.teacher_channels() {
            return Err(Error::shape(
                "GenerativeBlock::generate",
                format!("input has {c} channels, block generates {}", self.teacher_channels()),
            ));
        }
        let mut x = masked_aligned.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            if i > 0 {
                x = relu(&x);
            }
            x = conv.forward(&x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.align.params().chain(self.layers.iter().flat_map(|l| l.params()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.align.params_mut().chain(self.layers.iter_mut().flat_map(|l| l.params_mut()))
    }
}
