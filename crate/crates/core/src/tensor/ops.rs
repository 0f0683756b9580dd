use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, "add", &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, "sub", &[self, other], |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, "mul", &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.iter().zip(b.data().iter()).map(|(&g, &b)| g * b).collect());
            let gb = needs[1].then(|| g.iter().zip(a.data().iter()).map(|(&g, &a)| g * a).collect());
            vec![ga, gb]
        }))
    }

    /// Elementwise product with a constant factor of identical length
    /// (no gradient flows into `factor`).
    pub fn mul_const(&self, factor: &[S]) -> Result<Tensor<S>> {
        if factor.len() != self.numel() {
            return Err(Error::shape(
                "mul_const",
                format!("factor has {} elements, tensor {:?} has {}", factor.len(), self.shape(), self.numel()),
            ));
        }
        let data = self.data().iter().zip(factor).map(|(&a, &b)| a * b).collect();
        let factor = factor.to_vec();
        Ok(Tensor::from_op(self.shape().to_vec(), data, "mul_const", &[self], move |g, _| {
            vec![Some(g.iter().zip(&factor).map(|(&g, &f)| g * f).collect())]
        }))
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, "scale", &[self], move |g, _| {
            vec![Some(g.iter().map(|&v| v * factor).collect())]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![S::from_f64_lossy(total)], "sum", &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel().max(1);
        self.sum().scale(S::one() / S::from_usize(n).unwrap_or_else(S::one))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), "reshape", &[self], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }
}
