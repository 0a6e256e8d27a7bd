//! Row/column-strided single-precision matrix multiply.

/// A strided view: element `(i, j)` lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Dense row-major matrix with `cols` columns.
    pub fn rows(cols: usize) -> Self {
        Layout {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a dense row-major matrix with `cols` columns.
    pub fn trans(cols: usize) -> Self {
        Layout {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `C ← A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = lc.offset + i * lc.rs + j * lc.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(la.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(lb.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
