//! Raw slice kernels shared by `Tensor` and the autodiff graph.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access to the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place stabilized softmax of one row; masked entries get probability 0.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let visible = |j: usize| mask.is_none_or(|m| !m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    let mut total = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if visible(j) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    }
}
