//! Low-level loops shared by the forward and backward passes.

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored `m x k` (or `k x m` when `trans_a`), `b` is stored `k x n`
/// (or `n x k` when `trans_b`), `c` is `m x n`. All row-major.
#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c.fill(0.0);
    }
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        for p in 0..k {
            let aip = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if trans_b {
                row.iter_mut().enumerate().for_each(|(j, o)| *o += aip * b[j * k + p]);
            } else {
                row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, x)| *o += aip * x);
            }
        }
    }
}

/// Products up to this many multiply-adds skip the packed kernel, whose
/// setup cost dominates at that size.
const SMALL_GEMM: usize = 8192;

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, trans_a, b, trans_b, c, accumulate);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds
    // of its slice, and `c` does not alias `a` or `b` (distinct borrows).
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

/// For each flat index of `shape`, the flat index after dropping `axes`.
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let keep: Vec<bool> = (0..shape.len()).map(|a| !axes.contains(&a)).collect();
    // Stride of each kept axis in the output layout.
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for a in (0..shape.len()).rev() {
        if keep[a] {
            out_strides[a] = stride;
            stride *= shape[a];
        }
    }
    // Expand one axis at a time: each step repeats every prefix entry once per
    // coordinate of the next axis.
    let mut map = vec![0usize];
    for (&len, &s) in shape.iter().zip(&out_strides) {
        let mut next = Vec::with_capacity(map.len() * len);
        for &p in &map {
            next.extend((0..len).map(|i| p + i * s));
        }
        map = next;
    }
    debug_assert_eq!(map.len(), total);
    map
}
