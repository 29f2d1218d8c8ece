//! Safe wrapper over the `f64` matrix product used by the convolutions.

/// Row-major `m x k` or its transpose, addressed by strides.
#[derive(Clone, Copy)]
pub(super) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// A row-major `rows x cols` matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// An arbitrary strided view; every addressed element must lie in `data`.
    pub fn strided(
        data: &'a [f64],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            assert!((rows - 1) * row_stride + (cols - 1) * col_stride < data.len());
        }
        MatRef {
            data,
            rows,
            cols,
            row_stride: row_stride as isize,
            col_stride: col_stride as isize,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a * b + beta * c` with `c` addressed by strides. Rows of `c` must not
/// overlap: `row_stride >= cols * col_stride`.
pub(super) fn gemm_strided(
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    row_stride: usize,
    col_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(col_stride >= 1 && row_stride >= n * col_stride);
    assert!((m - 1) * row_stride + (n - 1) * col_stride < c.len());
    // The packed kernels work on 8-row panels; a short, wide product wastes
    // most of each panel, so compute its transpose instead.
    let (a, b, m, n, rs, cs) = if m < 8 && n > m {
        (b.t(), a.t(), n, m, col_stride, row_stride)
    } else {
        (a, b, m, n, row_stride, col_stride)
    };
    // SAFETY: `MatRef` construction bounds every element of `a` and `b` inside
    // their slices; the asserts above bound `c` and make its elements
    // pairwise distinct, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            rs as isize,
            cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
        let n = b.cols;
        gemm_strided(a, b, beta, c, n, 1);
    }

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T (3x2) times a (2x3)
        let mut d = [0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        // accumulate
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), 1.0, &mut c);
        assert_eq!(c, [8.0, 10.0, 20.0, 22.0]);
    }
}
