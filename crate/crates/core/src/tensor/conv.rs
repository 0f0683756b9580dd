use rayon::prelude::*;

use super::{dims4, matmul, return_scratch, take_scratch, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis, if the kernel fits.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.oh * self.ow
    }

    fn is_same_stride1(&self) -> bool {
        self.stride == 1 && self.oh == self.h && self.ow == self.w
    }

    /// Output indices `lo..hi` whose input index `o·stride + k − pad`
    /// lies inside `0..extent`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = (extent + self.pad).saturating_sub(k).div_ceil(self.stride).min(out);
        (lo.min(hi), hi)
    }

    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        self.valid_range(kj, self.w, self.ow)
    }

    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        self.valid_range(ki, self.h, self.oh)
    }

}

/// Writes the column matrix of one sample into `cols`, whose rows are
/// `row_stride` long; this sample's block starts at `offset` in each row.
fn im2col<S: Scalar>(x: &[S], g: &Geometry, cols: &mut [S], row_stride: usize, offset: usize) {
    if g.is_same_stride1() {
        return im2col_same(x, g, cols, row_stride, offset);
    }
    let l = g.col_len();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ki);
            for kj in 0..g.kw {
                let (lo, hi) = g.valid_cols(kj);
                let row = ((ch * g.kh + ki) * g.kw + kj) * row_stride + offset;
                let dst = &mut cols[row..row + l];
                // one fill per tap is much cheaper than many tiny ones
                dst.fill(S::zero());
                if hi == lo {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        out.copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                    } else {
                        let src = &src[lo * g.stride + kj - g.pad..];
                        for (v, s) in out.iter_mut().zip(src.iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates one sample's columns into `dx`.
fn col2im<S: Scalar>(cols: &mut [S], g: &Geometry, dx: &mut [S], row_stride: usize, offset: usize) {
    if g.is_same_stride1() {
        return col2im_same(cols, g, dx, row_stride, offset);
    }
    let l = g.col_len();
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = g.valid_rows(ki);
            for kj in 0..g.kw {
                let (lo, hi) = g.valid_cols(kj);
                let row = ((ch * g.kh + ki) * g.kw + kj) * row_stride + offset;
                let src = &cols[row..row + l];
                if hi == lo {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        let d = &mut dst[lo + kj - g.pad..hi + kj - g.pad];
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    } else {
                        let d = &mut dst[lo * g.stride + kj - g.pad..];
                        d.iter_mut().step_by(g.stride).zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
        }
    }
}

/// Flat shift of kernel tap `(ki, kj)` and the range of flattened output
/// positions whose shifted source index stays inside the plane.
fn same_shift(g: &Geometry, ki: usize, kj: usize) -> (isize, isize, usize, usize) {
    let l = (g.h * g.w) as isize;
    let (dy, dx) = (ki as isize - g.pad as isize, kj as isize - g.pad as isize);
    let d = dy * g.w as isize + dx;
    let lo = (-d).clamp(0, l) as usize;
    let hi = (l - d).clamp(0, l) as usize;
    (d, dx, lo, hi.max(lo))
}

/// Zeroes, in every output row, the columns whose tap wrapped around a
/// row edge.
fn zero_wrapped<S: Scalar>(dst: &mut [S], g: &Geometry, dx: isize) {
    if dx == 0 {
        return;
    }
    let w = g.w;
    let (a, b) = if dx > 0 {
        (w.saturating_sub(dx as usize), w)
    } else {
        (0, ((-dx) as usize).min(w))
    };
    // column-wise so the compiler does not turn each row into a memset call
    for j in a..b {
        for v in dst[j..].iter_mut().step_by(w) {
            *v = S::zero();
        }
    }
}

/// im2col for stride 1 with output size equal to input size: each column
/// row is the whole plane shifted by a constant flat offset.
fn im2col_same<S: Scalar>(x: &[S], g: &Geometry, cols: &mut [S], row_stride: usize, offset: usize) {
    let l = g.h * g.w;
    for ch in 0..g.c {
        let plane = &x[ch * l..(ch + 1) * l];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (d, dx, lo, hi) = same_shift(g, ki, kj);
                let row = ((ch * g.kh + ki) * g.kw + kj) * row_stride + offset;
                let dst = &mut cols[row..row + l];
                dst[..lo].fill(S::zero());
                dst[hi..].fill(S::zero());
                if hi > lo {
                    let s0 = (lo as isize + d) as usize;
                    dst[lo..hi].copy_from_slice(&plane[s0..s0 + (hi - lo)]);
                }
                zero_wrapped(dst, g, dx);
            }
        }
    }
}

/// Adjoint of [`im2col_same`]. Clobbers the wrapped entries of `cols`.
fn col2im_same<S: Scalar>(cols: &mut [S], g: &Geometry, dx: &mut [S], row_stride: usize, offset: usize) {
    let l = g.h * g.w;
    for ch in 0..g.c {
        let plane = &mut dx[ch * l..(ch + 1) * l];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (d, sx, lo, hi) = same_shift(g, ki, kj);
                let row = ((ch * g.kh + ki) * g.kw + kj) * row_stride + offset;
                let src = &mut cols[row..row + l];
                zero_wrapped(src, g, sx);
                if hi > lo {
                    let s0 = (lo as isize + d) as usize;
                    plane[s0..s0 + (hi - lo)]
                        .iter_mut()
                        .zip(&src[lo..hi])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

/// Column-matrix elements per sample group; bounds scratch memory while
/// keeping the GEMMs wide.
const GROUP_BUDGET: usize = 1 << 22;

/// `c (m×n) = a (m×k) · op(b)`, with rows of `c` split across the rayon
/// pool. Each output element is produced by exactly one task.
#[allow(clippy::too_many_arguments)]
fn par_matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], trans_b: bool, c: &mut [S], accumulate: bool) {
    let threads = rayon::current_num_threads();
    if threads <= 1 || m < 2 * threads || m * k * n < 1 << 16 {
        matmul(m, k, n, a, false, b, trans_b, c, accumulate);
        return;
    }
    let rows = m.div_ceil(threads);
    c[..m * n].par_chunks_mut(rows * n).enumerate().for_each(|(t, ct)| {
        let r = ct.len() / n;
        matmul(r, k, n, &a[t * rows * k..], false, b, trans_b, ct, accumulate);
    });
}

/// 2-D convolution (cross-correlation) on NCHW input with an OCkk weight.
///
/// Groups of samples are lowered to one column matrix `[C·kh·kw, G·OH·OW]`
/// and multiplied in a single GEMM. Groups are processed in a fixed order,
/// so results do not depend on scheduling.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(input, "conv2d")?;
    let (o, wc, kh, kw) = match *weight.shape() {
        [o, c, kh, kw] => (o, c, kh, kw),
        ref s => return Err(Error::shape("conv2d", format!("weight must be rank 4 (O, C, kh, kw), got {s:?}"))),
    };
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} has {c} channels but weight {:?} expects {wc}", input.shape(), weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"),
        ));
    };
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh,
        ow,
    };
    let (ckk, l, chw) = (g.col_rows(), g.col_len(), c * h * w);
    let group = (GROUP_BUDGET / (ckk * l).max(1)).clamp(1, n.max(1));

    let mut out = Vec::with_capacity(n * o * l);
    {
        let x = input.data();
        let wt = weight.data();
        let bias_data = bias.map(|b| b.to_vec());
        let mut cols = take_scratch::<S>(ckk * group * l);
        let mut y = take_scratch::<S>(o * group * l);
        for g0 in (0..n).step_by(group) {
            let gs = group.min(n - g0);
            let gl = gs * l;
            for j in 0..gs {
                im2col(&x[(g0 + j) * chw..(g0 + j + 1) * chw], &g, &mut cols, gl, j * l);
            }
            par_matmul(o, ckk, gl, &wt, &cols[..ckk * gl], false, &mut y, false);
            for j in 0..gs {
                for oc in 0..o {
                    let row = &y[oc * gl + j * l..oc * gl + (j + 1) * l];
                    match &bias_data {
                        Some(b) => out.extend(row.iter().map(|&v| v + b[oc])),
                        None => out.extend_from_slice(row),
                    }
                }
            }
        }
        return_scratch(cols);
        return_scratch(y);
    }

    let mut inputs = vec![input, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let (x_t, w_t) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(vec![n, o, oh, ow], out, "conv2d", &inputs, move |dy, needs| {
        let x = x_t.data();
        let wt = w_t.data();
        let (x, wt): (&[S], &[S]) = (&x, &wt);
        let (need_dx, need_dw) = (needs[0], needs[1]);

        let mut dx = need_dx.then(|| vec![S::zero(); n * chw]);
        let mut dw = need_dw.then(|| vec![S::zero(); o * ckk]);
        if need_dx || need_dw {
            // W^T, so the data-gradient GEMM can be split by rows too.
            let w_tr: Vec<S> = if need_dx {
                let mut t = vec![S::zero(); ckk * o];
                for (oc, row) in wt.chunks_exact(ckk).enumerate() {
                    for (r, &v) in row.iter().enumerate() {
                        t[r * o + oc] = v;
                    }
                }
                t
            } else {
                Vec::new()
            };
            let mut cols = take_scratch::<S>(ckk * group * l);
            let mut dyg = take_scratch::<S>(o * group * l);
            for g0 in (0..n).step_by(group) {
                let gs = group.min(n - g0);
                let gl = gs * l;
                for j in 0..gs {
                    let src = &dy[(g0 + j) * o * l..(g0 + j + 1) * o * l];
                    for (oc, row) in src.chunks_exact(l).enumerate() {
                        dyg[oc * gl + j * l..oc * gl + (j + 1) * l].copy_from_slice(row);
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for j in 0..gs {
                        im2col(&x[(g0 + j) * chw..(g0 + j + 1) * chw], &g, &mut cols, gl, j * l);
                    }
                    par_matmul(o, gl, ckk, &dyg, &cols[..ckk * gl], true, dw, g0 > 0);
                }
                if let Some(dx) = dx.as_mut() {
                    par_matmul(ckk, o, gl, &w_tr, &dyg[..o * gl], false, &mut cols, false);
                    for j in 0..gs {
                        col2im(&mut cols, &g, &mut dx[(g0 + j) * chw..(g0 + j + 1) * chw], gl, j * l);
                    }
                }
            }
            return_scratch(cols);
            return_scratch(dyg);
        }

        let mut grads = vec![dx, dw];
        if needs.len() > 2 {
            let db = needs[2].then(|| {
                let mut db = vec![0f64; o];
                for dyi in dy.chunks(o * l) {
                    for (acc, row) in db.iter_mut().zip(dyi.chunks(l)) {
                        *acc += row.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                db.into_iter().map(S::from_f64_lossy).collect()
            });
            grads.push(db);
        }
        grads
    }))
}
