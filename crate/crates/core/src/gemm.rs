//! Bounds-checked front end to `matrixmultiply::dgemm`.

/// Row and column stride of a strided matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub usize, pub usize);

fn last_index(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.0 + (cols - 1) * s.1
}

/// `c <- a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(m, n, sc) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * sc.0 + j * sc.1];
                *v *= beta;
            }
        }
        return;
    }
    assert!(last_index(m, k, sa) < a.len(), "gemm: a view out of bounds");
    assert!(last_index(k, n, sb) < b.len(), "gemm: b view out of bounds");
    // SAFETY: every element addressed through the three views lies inside
    // the corresponding slice (checked above), and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
