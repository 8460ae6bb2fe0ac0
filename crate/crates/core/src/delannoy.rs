//! Delannoy numbers and the temporal-shift bounds built on them.
//!
//! `D(m, n)` counts the monotone lattice paths from `(1, 1)` to `(m, n)` using
//! right, down and diagonal steps — exactly the alignments Soft-DTW sums over.
//! The module provides:
//!
//! - a [`DelannoyTable`] of natural-log values valid far past the point where
//!   `D(m, m)` overflows an `f64` (around `m = 520`), cross-checked against an
//!   exact integer block for small indices;
//! - the central-sequence recursion in ratio form;
//! - the quadratic shift bound `P(k)`, the Dirac-series lower bound
//!   `LB_beta(k)` and the heuristic choosing the Soft-DTW temperature `beta`
//!   from a target saturation shift `k_max`.

use crate::math::logaddexp;
use thiserror::Error;

/// Largest index kept in the exact integer cross-check block. `D(30, 30)`
/// is ~8.6e21, comfortably inside `u128`.
pub const EXACT_MAX_INDEX: usize = 30;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DelannoyError {
    #[error("index ({m}, {n}) outside table capacity {max_index} (indices are 1-based)")]
    OutOfRange { m: usize, n: usize, max_index: usize },
    #[error("series length T = {t} too short: the Dirac bound requires T >= 6")]
    SeriesTooShort { t: usize },
    #[error("parameter {name} = {value} is outside its domain")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(
        "beta heuristic infeasible: P(k_max) + log((e^eta - 1) H) = {denominator} <= 0; \
         increase k_max or eta"
    )]
    InfeasibleHeuristic { denominator: f64 },
}

pub type Result<T> = std::result::Result<T, DelannoyError>;

/// Natural-log Delannoy numbers `log D(m, n)` for `1 <= m, n <= max_index`.
///
/// The recursion `D(m+1, n+1) = D(m, n+1) + D(m+1, n) + D(m, n)` is run in the
/// linear domain on (mantissa, exponent) pairs — a running power-of-two scale
/// per cell with the log accumulated separately — so the additions stay exact
/// to f64 rounding at any index. Immutable after construction and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct DelannoyTable {
    max_index: usize,
    log_values: Vec<f64>,
    exact_values: Vec<u128>,
    exact_n: usize,
}

impl DelannoyTable {
    pub fn new(max_index: usize) -> Self {
        assert!(max_index >= 1, "table capacity must be at least 1");
        let n = max_index;
        let mut log_values = vec![0.0f64; n * n];

        // Row 1 is all ones; subsequent rows follow the three-term recursion
        // on scaled (mantissa in [1,2), exponent) pairs.
        let mut prev: Vec<(f64, i64)> = vec![(1.0, 0); n];
        let mut cur: Vec<(f64, i64)> = vec![(1.0, 0); n];
        for m in 1..n {
            cur[0] = (1.0, 0);
            for j in 1..n {
                cur[j] = add3(prev[j], cur[j - 1], prev[j - 1]);
                log_values[m * n + j] = log_of(cur[j]);
            }
            std::mem::swap(&mut prev, &mut cur);
        }

        let exact_n = max_index.min(EXACT_MAX_INDEX);
        let mut exact_values = vec![1u128; exact_n * exact_n];
        for m in 1..exact_n {
            for j in 1..exact_n {
                exact_values[m * exact_n + j] = exact_values[(m - 1) * exact_n + j]
                    + exact_values[m * exact_n + j - 1]
                    + exact_values[(m - 1) * exact_n + j - 1];
            }
        }

        Self { max_index, log_values, exact_values, exact_n }
    }

    pub fn max_index(&self) -> usize {
        self.max_index
    }

    /// `log D(m, n)` for 1-based indices.
    pub fn log(&self, m: usize, n: usize) -> Result<f64> {
        if m < 1 || n < 1 || m > self.max_index || n > self.max_index {
            return Err(DelannoyError::OutOfRange { m, n, max_index: self.max_index });
        }
        Ok(self.log_values[(m - 1) * self.max_index + (n - 1)])
    }

    /// Exact `D(m, n)` from the integer cross-check block, if retained.
    pub fn exact(&self, m: usize, n: usize) -> Option<u128> {
        if m >= 1 && n >= 1 && m <= self.exact_n && n <= self.exact_n {
            Some(self.exact_values[(m - 1) * self.exact_n + (n - 1)])
        } else {
            None
        }
    }
}

/// Natural log of `D(m, n)` computed on the fly. Convenience for callers that
/// need a handful of values rather than a table.
pub fn delannoy_log(table: &DelannoyTable, m: usize, n: usize) -> Result<f64> {
    table.log(m, n)
}

fn add3(a: (f64, i64), b: (f64, i64), c: (f64, i64)) -> (f64, i64) {
    let e = a.1.max(b.1).max(c.1);
    let mut s = a.0 * scale(a.1 - e) + b.0 * scale(b.1 - e) + c.0 * scale(c.1 - e);
    let mut e = e;
    while s >= 2.0 {
        s *= 0.5;
        e += 1;
    }
    (s, e)
}

fn scale(diff: i64) -> f64 {
    // diff <= 0; 2^diff is exact down to the subnormal range and negligible past it.
    if diff < -1060 {
        0.0
    } else {
        (diff as f64).exp2()
    }
}

fn log_of((mant, exp): (f64, i64)) -> f64 {
    mant.ln() + exp as f64 * std::f64::consts::LN_2
}

/// `log D(m)` for the central (diagonal) sequence `D(m) = D(m, m)`, via the
/// two-stage recursion `m D(m+1) = (6m - 3) D(m) - (m - 1) D(m-1)` carried in
/// ratio form `r_m = D(m+1)/D(m)`, which never overflows.
pub fn central_delannoy_log(m: usize) -> Result<f64> {
    if m < 1 {
        return Err(DelannoyError::OutOfRange { m, n: m, max_index: usize::MAX });
    }
    let mut log_d = 0.0f64;
    let mut ratio = 3.0f64; // r_1 = D(2)/D(1)
    for j in 1..m {
        log_d += ratio.ln();
        let next = (j + 1) as f64;
        ratio = (6.0 - 3.0 / next) - (1.0 - 1.0 / next) / ratio;
    }
    Ok(log_d)
}

/// Constants entering the shift bounds for a series of length `t`.
#[derive(Debug, Clone, Copy)]
pub struct BoundConstants {
    /// `1 + sqrt(2)`, the growth base.
    pub c: f64,
    /// `(21/22) c^2 - 5`, the growth-exponent constant (~0.56).
    pub sigma: f64,
    /// `(2 - sqrt(2)) / T`, quadratic coefficient of `P`.
    pub alpha: f64,
    /// `(3 sqrt(2) - 4) / (3T)`, linear coefficient of `P`.
    pub rho: f64,
    /// `92 T^sigma`, the Dirac-bound cap.
    pub h: f64,
    /// Series length.
    pub t: usize,
}

impl BoundConstants {
    pub fn new(t: usize) -> Self {
        assert!(t >= 1, "series length must be positive");
        let sqrt2 = std::f64::consts::SQRT_2;
        let c = 1.0 + sqrt2;
        let sigma = 21.0 / 22.0 * c * c - 5.0;
        let tf = t as f64;
        Self {
            c,
            sigma,
            alpha: (2.0 - sqrt2) / tf,
            rho: (3.0 * sqrt2 - 4.0) / (3.0 * tf),
            h: 92.0 * tf.powf(sigma),
            t,
        }
    }
}

/// The quadratic shift bound `P(k) = alpha k (k - 1) + rho k + 1/(3T)`.
pub fn quad_lower_bound(k: usize, t: usize) -> f64 {
    let consts = BoundConstants::new(t);
    let kf = k as f64;
    consts.alpha * kf * (kf - 1.0) + consts.rho * kf + 1.0 / (3.0 * t as f64)
}

/// Dirac-series lower bound on the Soft-DTW shift gap,
/// `LB_beta(k) = -beta log(e^{-P(k)} (1 - lambda) + lambda H)` with
/// `lambda = e^{-r/beta}` and `H = 92 T^sigma`. Established for `T >= 6`.
pub fn dirac_lower_bound(k: usize, beta: f64, r: f64, t: usize) -> Result<f64> {
    if t < 6 {
        return Err(DelannoyError::SeriesTooShort { t });
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(DelannoyError::InvalidParameter { name: "beta", value: beta });
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(DelannoyError::InvalidParameter { name: "r", value: r });
    }
    let consts = BoundConstants::new(t);
    let p_k = quad_lower_bound(k, t);
    let log_lambda = -r / beta;
    // log of e^{-P(k)}(1 - lambda) + lambda H, assembled in the log domain so
    // neither factor underflowing can zero the argument.
    let one_minus_lambda = -log_lambda.exp().ln_1p();
    let log_arg = logaddexp(-p_k + one_minus_lambda, log_lambda + consts.h.ln());
    Ok(-beta * log_arg)
}

/// Limit of [`dirac_lower_bound`] as the shift grows: `-beta log(lambda H)`.
pub fn dirac_lower_bound_limit(beta: f64, r: f64, t: usize) -> Result<f64> {
    if t < 6 {
        return Err(DelannoyError::SeriesTooShort { t });
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(DelannoyError::InvalidParameter { name: "beta", value: beta });
    }
    let consts = BoundConstants::new(t);
    Ok(-beta * (-r / beta + consts.h.ln()))
}

/// Smallest `beta` guaranteeing that `LB_beta` saturates within `eta * beta`
/// of its large-shift limit at `k_max`: `beta = r / (P(k_max) + log((e^eta - 1) H))`.
pub fn beta_heuristic(k_max: usize, eta: f64, r: f64, t: usize) -> Result<f64> {
    if t < 6 {
        return Err(DelannoyError::SeriesTooShort { t });
    }
    if k_max < 1 {
        return Err(DelannoyError::InvalidParameter { name: "k_max", value: k_max as f64 });
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(DelannoyError::InvalidParameter { name: "eta", value: eta });
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(DelannoyError::InvalidParameter { name: "r", value: r });
    }
    let consts = BoundConstants::new(t);
    let denominator = quad_lower_bound(k_max, t) + (eta.exp_m1() * consts.h).ln();
    if !(denominator > 0.0) {
        return Err(DelannoyError::InfeasibleHeuristic { denominator });
    }
    Ok(r / denominator)
}
