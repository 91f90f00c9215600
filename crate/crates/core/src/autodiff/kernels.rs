//! Dense matrix product kernel shared by forward and backward passes.

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates, so a plain loop is used.
const SMALL_GEMM: usize = 4096;

/// `c += a * b` where `a` is `m x k`, `b` is `k x n` and `c` is a contiguous
/// row-major `m x n` buffer. Operand layouts are given as
/// `(row_stride, col_stride)` so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    if m * n * k <= SMALL_GEMM {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for l in 0..k {
                let av = a[i * rsa + l * csa];
                if csb == 1 {
                    let brow = &b[l * rsb..l * rsb + n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b[l * rsb + j * csb];
                    }
                }
            }
        }
        return;
    }
    // SAFETY: the debug assertions above spell out the bounds the strided
    // views stay within; callers pass buffers sized from tensor shapes.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
