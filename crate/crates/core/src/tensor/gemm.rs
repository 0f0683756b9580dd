use super::Scalar;

/// Row-major matrix product `c = op(a) * op(b)` (or `c += ...` when
/// `accumulate`), where `op` optionally transposes.
///
/// `a` is logically `m x k` (stored `k x m` when `trans_a`), `b` is
/// logically `k x n` (stored `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "matmul: lhs has {} elements, need {}", a.len(), m * k);
    assert!(b.len() >= k * n, "matmul: rhs has {} elements, need {}", b.len(), k * n);
    assert!(c.len() >= m * n, "matmul: out has {} elements, need {}", c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    S::gemm(m, k, n, a, a_strides, b, b_strides, beta, c);
}
