/// Operand layout for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Row-major as stored.
    Normal,
    /// Row-major storage read as its transpose.
    Transposed,
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and `c` is
/// `m x n`, all row-major. `Layout::Transposed` reads the stored matrix (of
/// shape `k x m` or `n x k`) as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: lengths are checked above and the strides describe dense
    // row-major matrices of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
