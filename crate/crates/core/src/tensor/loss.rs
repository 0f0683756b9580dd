use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax of a `rows × k` matrix, stabilized by max-subtraction.
pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::shape("softmax_cross_entropy", format!("logits must be N×K, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("softmax_cross_entropy", "empty batch"));
    }
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let probs = softmax_rows(&z, k);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() - row[y]
        })
        .sum::<f64>()
        / n as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        Vec::new(),
        vec![S::from_f64_lossy(loss)],
        "softmax_cross_entropy",
        &[logits],
        move |g, _| {
            let scale = g[0].as_f64() / n as f64;
            let mut d: Vec<S> = Vec::with_capacity(n * k);
            for (i, &y) in labels.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    d.push(S::from_f64_lossy((probs[i * k + j] - onehot) * scale));
                }
            }
            vec![Some(d)]
        },
    ))
}

/// `Σ (a − b)²` over all elements (a sum, not a mean).
pub fn sq_l2_sum<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "sq_l2_sum",
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let diff: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    let total: f64 = diff.iter().map(|d| d.as_f64().powi(2)).sum();
    Ok(Tensor::from_op(Vec::new(), vec![S::from_f64_lossy(total)], "sq_l2_sum", &[a, b], move |g, needs| {
        let two_g = g[0] + g[0];
        let ga = needs[0].then(|| diff.iter().map(|&d| two_g * d).collect());
        let gb = needs[1].then(|| diff.iter().map(|&d| -(two_g * d)).collect());
        vec![ga, gb]
    }))
}
