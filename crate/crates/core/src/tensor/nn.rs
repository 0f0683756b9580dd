use super::{dims4, matmul, Scalar, Tensor};
use crate::error::{Error, Result};

/// `max(0, x)`; the subgradient at exactly 0 is 0.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    let input = x.clone();
    Tensor::from_op(x.shape().to_vec(), data, "relu", &[x], move |g, _| {
        let x = input.data();
        vec![Some(
            g.iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                .collect(),
        )]
    })
}

/// `x · weightᵀ + bias` for `x: N×D`, `weight: K×D`, `bias: K`.
pub fn linear<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::shape("linear", format!("input must be N×D, got {s:?}"))),
    };
    let k = match *weight.shape() {
        [k, wd] if wd == d => k,
        ref s => {
            return Err(Error::shape(
                "linear",
                format!("weight {s:?} incompatible with input {:?}", x.shape()),
            ))
        }
    };
    if bias.shape() != [k] {
        return Err(Error::shape("linear", format!("bias {:?}, expected [{k}]", bias.shape())));
    }
    let mut out = vec![S::zero(); n * k];
    matmul(n, d, k, &x.data(), false, &weight.data(), true, &mut out, false);
    {
        let b = bias.data();
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b.iter()).for_each(|(v, &b)| *v += b);
        }
    }
    let (x_t, w_t) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(vec![n, k], out, "linear", &[x, weight, bias], move |dy, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![S::zero(); n * d];
            matmul(n, k, d, dy, false, &w_t.data(), false, &mut dx, false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![S::zero(); k * d];
            matmul(k, n, d, dy, true, &x_t.data(), false, &mut dw, false);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![S::zero(); k];
            for row in dy.chunks(k) {
                db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
            }
            db
        });
        vec![dx, dw, db]
    }))
}

/// Per-channel batch normalization over (N, H, W).
///
/// In training mode the batch statistics normalize the input and the
/// running statistics are updated in place
/// (`running = (1 - momentum) * running + momentum * batch`, unbiased
/// variance). In eval mode the running statistics are used unchanged.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    training: bool,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<S>> {
    if !(eps > 0.0) {
        return Err(Error::invalid("batch_norm2d", format!("eps must be positive, got {eps}")));
    }
    let (n, c, h, w) = dims4(x, "batch_norm2d")?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!("{name} has shape {:?}, input has {c} channels", t.shape()),
            ));
        }
    }
    let hw = h * w;
    let m = n * hw;
    let idx = |i: usize, ch: usize| i * c * hw + ch * hw;

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += xd[idx(i, ch)..idx(i, ch) + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0;
            for i in 0..n {
                ss += xd[idx(i, ch)..idx(i, ch) + hw]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / m as f64;
        }
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for ch in 0..c {
            let unbiased = if m > 1 { var[ch] * m as f64 / (m - 1) as f64 } else { var[ch] };
            rm[ch] = S::from_f64_lossy((1.0 - momentum) * rm[ch].as_f64() + momentum * mean[ch]);
            rv[ch] = S::from_f64_lossy((1.0 - momentum) * rv[ch].as_f64() + momentum * unbiased);
        }
        (mean, var)
    } else {
        (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        )
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
    let mean: Vec<S> = mean.into_iter().map(S::from_f64_lossy).collect();

    let (xhat, out): (Vec<S>, Vec<S>) = {
        let (gd, bd) = (gamma.data(), beta.data());
        let xhat: Vec<S> = x
            .data()
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(p, plane)| {
                let ch = p % c;
                let (mu, k) = (mean[ch], inv_std[ch]);
                plane.iter().map(move |&v| (v - mu) * k)
            })
            .collect();
        let out = xhat
            .chunks_exact(hw)
            .enumerate()
            .flat_map(|(p, plane)| {
                let ch = p % c;
                let (g, b) = (gd[ch], bd[ch]);
                plane.iter().map(move |&v| g * v + b)
            })
            .collect();
        (xhat, out)
    };

    let gamma_t = gamma.clone();
    Ok(Tensor::from_op(vec![n, c, h, w], out, "batch_norm2d", &[x, gamma, beta], move |dy, needs| {
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xhat = vec![S::zero(); c];
        for (p, (g, xh)) in dy.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
            let ch = p % c;
            let (mut s, mut sx) = (S::zero(), S::zero());
            for (&d, &v) in g.iter().zip(xh) {
                s += d;
                sx += d * v;
            }
            sum_dy[ch] += s;
            sum_dy_xhat[ch] += sx;
        }
        let dx = needs[0].then(|| {
            let gd = gamma_t.data();
            let mf = S::from_usize(m).unwrap_or_else(S::one);
            let mut dx = Vec::with_capacity(n * c * hw);
            for (p, (g, xh)) in dy.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                let ch = p % c;
                let k = gd[ch] * inv_std[ch];
                if training {
                    let (kk, sd, sdx) = (k / mf, sum_dy[ch], sum_dy_xhat[ch]);
                    dx.extend(g.iter().zip(xh).map(|(&d, &v)| kk * (mf * d - sd - v * sdx)));
                } else {
                    dx.extend(g.iter().map(|&d| k * d));
                }
            }
            dx
        });
        vec![dx, needs[1].then(|| sum_dy_xhat.clone()), needs[2].then(|| sum_dy.clone())]
    }))
}

/// Spatial mean per channel: NCHW -> NC.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("global_avg_pool", "spatial extent is empty"));
    }
    let inv = 1.0 / hw as f64;
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| S::from_f64_lossy(plane.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    let scale = S::from_f64_lossy(inv);
    Ok(Tensor::from_op(vec![n, c], out, "global_avg_pool", &[x], move |dy, _| {
        let mut dx = Vec::with_capacity(n * c * hw);
        for &g in dy {
            dx.extend(std::iter::repeat_n(g * scale, hw));
        }
        vec![Some(dx)]
    }))
}
