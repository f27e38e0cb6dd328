/// Whether an operand is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `[m,k]` and `op(b)` is `[k,n]`; with `Trans::Yes` the operand is
/// stored as the transpose (`[k,m]` or `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: Trans,
    b: &[f32],
    tb: Trans,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa) = match ta {
        Trans::No => (k, 1),
        Trans::Yes => (1, m),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n, 1),
        Trans::Yes => (1, k),
    };
    gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

/// Strided variant used for per-head attention slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    assert!(c.len() > last(m, n, rsc, csc), "gemm: output buffer too small");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * rsc + j * csc;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > last(m, k, rsa, csa), "gemm: lhs buffer too small");
    assert!(b.len() > last(k, n, rsb, csb), "gemm: rhs buffer too small");
    // SAFETY: every index the kernel touches lies within the bounds asserted
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
