//! Dense matrix kernels shared by the graph ops.

use super::Float;
use crate::par;

/// `out += op(a) · op(b)` for row-major matrices, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. `trans_a` means `a` is stored `k×m`; `trans_b` means `b`
/// is stored `n×k`.
///
/// Rows of `out` are independent work items; the reduction over `k` always
/// runs in index order.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Float>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    let parallel = par::worth_it(m * k * n, m);
    par::for_each_chunk(out, n, parallel, |i, row| {
        gemm_row(row, a, b, i, m, k, n, trans_a, trans_b)
    });
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_row<T: Float>(
    row: &mut [T],
    a: &[T],
    b: &[T],
    i: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    let a_at = |p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    if trans_b {
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (p, &bv) in b_row.iter().enumerate() {
                acc += a_at(p) * bv;
            }
            *o += acc;
        }
    } else {
        for p in 0..k {
            let av = a_at(p);
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Batched `gemm_acc` over `batch` independent matrix pairs laid out back to back.
#[allow(clippy::too_many_arguments)]
pub fn bgemm_acc<T: Float>(
    out: &mut [T],
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    if batch == 0 || m * n == 0 {
        return;
    }
    let parallel = par::worth_it(batch * m * k * n, batch);
    par::for_each_chunk(out, m * n, parallel, |bi, o| {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            gemm_row(&mut o[i * n..(i + 1) * n], a, b, i, m, k, n, trans_a, trans_b);
        }
    });
}
