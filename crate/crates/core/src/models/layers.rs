//! Parameterized building blocks shared by backbones and generative blocks.

use rand::Rng;

use crate::error::Result;
use crate::optim::Parameter;
use crate::tensor::{batch_norm2d, conv2d, linear, Scalar, Tensor};

fn uniform<S: Scalar, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| S::from_f64_lossy(rng.random_range(-bound..bound))).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar = f32> {
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = uniform(shape.iter().product(), (6.0 / fan_in as f64).sqrt(), rng);
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::new(&shape, w).expect("weight shape")),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(x, &self.weight.tensor, self.bias.as_ref().map(|b| &b.tensor), self.stride, self.padding)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<S>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<S: Scalar = f32> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub name: String,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.weight"), Tensor::full(&[channels], S::one())),
            beta: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
            name: name.to_string(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        batch_norm2d(
            x,
            &self.gamma.tensor,
            &self.beta.tensor,
            &self.running_mean,
            &self.running_var,
            training,
            BN_EPS,
            BN_MOMENTUM,
        )
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<S>> {
        [&self.gamma, &self.beta].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        [&mut self.gamma, &mut self.beta].into_iter()
    }

    pub fn buffers(&self) -> [(String, &Tensor<S>); 2] {
        [
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = uniform(in_features * out_features, 1.0 / (in_features as f64).sqrt(), rng);
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::new(&[out_features, in_features], w).expect("weight shape"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        linear(x, &self.weight.tensor, &self.bias.tensor)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<S>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}
