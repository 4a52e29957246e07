//! Safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn rm(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn rm_t(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

fn max_offset(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize
}

/// `c = a · b + beta · c` for `a: m x k`, `b: k x n`, `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(m * k == 0 || max_offset(m, k, la) < a.len());
    assert!(k * n == 0 || max_offset(k, n, lb) < b.len());
    assert_eq!(c.len(), m * n);
    if m * n == 0 {
        return;
    }
    // SAFETY: bounds of all three operands were checked against their
    // strides above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
