//! Log-domain scalar kernels shared by the solvers.

/// log(sum_i exp(v_i)) with the usual max shift. Returns -inf for an empty
/// slice or when every entry is -inf.
pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in values {
        if v > m {
            m = v;
        }
    }
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &v in values {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// log(exp(a) + exp(b)), stable for arguments of any magnitude.
pub(crate) fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Sup-norm distance that treats a pair of -inf entries as zero gap.
pub(crate) fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut gap = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        if x == f64::NEG_INFINITY && y == f64::NEG_INFINITY {
            continue;
        }
        let d = (x - y).abs();
        if d > gap {
            gap = d;
        }
    }
    gap
}
