//! Small dense kernels over row-major slices with explicit leading dimensions.
//! Written in axpy form so the inner loop is a contiguous fused multiply-add.

/// `C[m×n] += A[m×k] · B[k×n]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    c: &mut [f64],
    ldc: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        let arow = &a[i * lda..i * lda + k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `C[k×n] += A[m×k]ᵀ · B[m×n]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_tn(
    c: &mut [f64],
    ldc: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * lda..i * lda + k];
        let brow = &b[i * ldb..i * ldb + n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * ldc..p * ldc + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
