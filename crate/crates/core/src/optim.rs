//! Named parameters and SGD with momentum and coupled weight decay.

use crate::tensor::{Scalar, Tensor};

/// Trainable tensor with its momentum buffer and a unique dotted name.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub momentum_buffer: Vec<S>,
}

impl<S: Scalar> Parameter<S> {
    /// Wraps `tensor` and marks it as requiring gradients.
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        tensor.set_requires_grad(true);
        let momentum_buffer = vec![S::zero(); tensor.numel()];
        Self {
            name: name.into(),
            tensor,
            momentum_buffer,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdReport {
    pub updated: usize,
    /// Parameters that had no gradient and were left untouched.
    pub skipped: Vec<String>,
}

/// One SGD step:
/// `buf = momentum * buf + (grad + weight_decay * param)`, `param -= lr * buf`.
/// Gradients are cleared afterwards.
pub fn sgd_step<'a, S, I>(params: I, cfg: &SgdConfig) -> SgdReport
where
    S: Scalar,
    I: IntoIterator<Item = &'a mut Parameter<S>>,
{
    let lr = S::from_f64_lossy(cfg.lr);
    let mu = S::from_f64_lossy(cfg.momentum);
    let wd = S::from_f64_lossy(cfg.weight_decay);
    let mut report = SgdReport::default();
    for p in params {
        let Some(grad) = p.tensor.grad() else {
            report.skipped.push(p.name.clone());
            continue;
        };
        let mut data = p.tensor.data_mut();
        for ((w, b), g) in data.iter_mut().zip(p.momentum_buffer.iter_mut()).zip(grad) {
            *b = mu * *b + (g + wd * *w);
            *w -= lr * *b;
        }
        drop(data);
        p.tensor.zero_grad();
        report.updated += 1;
    }
    report
}
