//! Hot numeric kernels shared by forward and backward passes.
//!
//! Matrix multiplication uses the i-k-j loop order so the inner loop is a
//! contiguous scaled add, which the compiler vectorizes without any
//! reassociation of the accumulation (results stay bit-deterministic).

/// `out += a · b` where `a` is `[m, k]`, `b` is `[k, n]`, `out` is `[m, n]`.
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// In-place numerically stable softmax of one row: subtract the max, then
/// exponentiate and normalize by the sum. `-inf` entries come out as exact
/// zeros; the row must contain at least one finite entry.
pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    debug_assert!(!row.is_empty(), "softmax: empty row");
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    // A NaN row (e.g. a diverged forward pass) must propagate NaN so the
    // caller can surface it; only an all-masked row is a programming error.
    debug_assert!(
        max > f64::NEG_INFINITY || row.iter().any(|v| v.is_nan()),
        "softmax: row with no attendable entry"
    );
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
