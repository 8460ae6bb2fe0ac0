//! Soft-DTW: value and cost-matrix gradient via dynamic programming.
//!
//! The forward pass fills the classic warping table with a soft minimum of
//! temperature `beta`; the backward pass propagates multipliers through the
//! table in reverse index order and yields `E = d sdtw / d Delta`, the
//! Gibbs-weighted average alignment matrix. Brute-force oracles enumerate all
//! monotone lattice paths for small instances.
//!
//! Indexing note: `T1` rows always refer to the first series and `T2` columns
//! to the second; the backward recursion runs with both indices descending,
//! which is the order that makes its right-hand sides available.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AlignError {
    #[error("softmin of an empty set is undefined")]
    EmptyInput,
    #[error("beta = {0} is invalid here (must be {1})")]
    InvalidBeta(f64, &'static str),
    #[error("cost matrix entry ({row}, {col}) is not finite: {value}")]
    NonFiniteCost { row: usize, col: usize, value: f64 },
    #[error("cost matrix must have at least one row and one column")]
    EmptyCost,
    #[error("forward table shape {table:?} does not match cost shape {cost:?}")]
    ShapeMismatch { table: (usize, usize), cost: (usize, usize) },
    #[error("forward table was computed with beta = {table_beta}, got beta = {beta}")]
    BetaMismatch { table_beta: f64, beta: f64 },
    #[error("alignment enumeration guard exceeded: D({t1}, {t2}) = {count:.3e} > {guard:.1e}")]
    EnumerationGuard { t1: usize, t2: usize, count: f64, guard: f64 },
    #[error("series must be non-empty")]
    EmptySeries,
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Pairwise temporal cost matrix `Delta` of shape `T1 x T2`. Entries may be
/// any finite real; the DP needs no sign assumption.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    delta: Array2<f64>,
}

impl CostMatrix {
    pub fn new(delta: Array2<f64>) -> Result<Self> {
        if delta.nrows() == 0 || delta.ncols() == 0 {
            return Err(AlignError::EmptyCost);
        }
        for ((i, j), &v) in delta.indexed_iter() {
            if !v.is_finite() {
                return Err(AlignError::NonFiniteCost { row: i, col: j, value: v });
            }
        }
        Ok(Self { delta })
    }

    /// Squared-distance cost between two univariate series.
    pub fn from_univariate_sq(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(AlignError::EmptySeries);
        }
        let mut delta = Array2::zeros((x.len(), y.len()));
        for (i, &xi) in x.iter().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                delta[[i, j]] = (xi - yj) * (xi - yj);
            }
        }
        Self::new(delta)
    }

    pub fn rows(&self) -> usize {
        self.delta.nrows()
    }

    pub fn cols(&self) -> usize {
        self.delta.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.delta.view()
    }

    pub fn max_entry(&self) -> f64 {
        self.delta.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Intermediate soft costs `r` of shape `(T1+1) x (T2+1)`: `r[0][0] = 0`, the
/// remaining border is `+inf`, and `r[T1][T2]` is the sdtw value.
#[derive(Debug, Clone)]
pub struct ForwardTable {
    r: Array2<f64>,
    beta: f64,
}

impl ForwardTable {
    pub fn value(&self) -> f64 {
        self.r[[self.r.nrows() - 1, self.r.ncols() - 1]]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn table(&self) -> ArrayView2<'_, f64> {
        self.r.view()
    }
}

/// Soft alignment matrix `E` of shape `T1 x T2`: entry `(i, j)` is the Gibbs
/// probability that an alignment path passes through `(i, j)`, so every entry
/// lies in `[0, 1]` and both corners equal 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGradient {
    e: Array2<f64>,
}

impl AlignmentGradient {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.e
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.e
    }
}

/// Soft minimum: `-beta log sum_i exp(-v_i / beta)` for `beta > 0`, the exact
/// minimum at `beta = 0`. Continuous as `beta -> 0+`. `+inf` entries drop out;
/// if every entry is `+inf` the result is `+inf`.
pub fn softmin(values: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(AlignError::EmptyInput);
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(AlignError::InvalidBeta(beta, "non-negative and finite"));
    }
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if beta == 0.0 || m == f64::INFINITY {
        return Ok(m);
    }
    let mut s = 0.0;
    for &v in values {
        s += (-(v - m) / beta).exp();
    }
    Ok(m - beta * s.ln())
}

#[inline]
fn softmin3(a: f64, b: f64, c: f64, beta: f64) -> f64 {
    let m = a.min(b).min(c);
    if beta == 0.0 || m == f64::INFINITY {
        return m;
    }
    let s = (-(a - m) / beta).exp() + (-(b - m) / beta).exp() + (-(c - m) / beta).exp();
    m - beta * s.ln()
}

/// Forward recursion: `r[i][j] = delta(i, j) + softmin(r[i-1][j-1], r[i-1][j], r[i][j-1])`.
/// Returns the sdtw value together with the table the backward pass consumes.
/// `beta = 0` computes classic DTW.
pub fn sdtw_forward(delta: &CostMatrix, beta: f64) -> Result<(f64, ForwardTable)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(AlignError::InvalidBeta(beta, "non-negative and finite"));
    }
    let (t1, t2) = (delta.rows(), delta.cols());
    let mut r = Array2::from_elem((t1 + 1, t2 + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=t1 {
        for j in 1..=t2 {
            let sm = softmin3(r[[i - 1, j - 1]], r[[i - 1, j]], r[[i, j - 1]], beta);
            r[[i, j]] = delta.view()[[i - 1, j - 1]] + sm;
        }
    }
    let value = r[[t1, t2]];
    Ok((value, ForwardTable { r, beta }))
}

/// Backward recursion differentiating the forward pass: returns
/// `E = d sdtw / d Delta`. Requires the table produced by [`sdtw_forward`] on
/// the same cost and a strictly positive `beta` (the DTW limit is not
/// differentiable).
pub fn sdtw_backward(delta: &CostMatrix, table: &ForwardTable, beta: f64) -> Result<AlignmentGradient> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(AlignError::InvalidBeta(beta, "strictly positive"));
    }
    if beta != table.beta {
        return Err(AlignError::BetaMismatch { table_beta: table.beta, beta });
    }
    let (t1, t2) = (delta.rows(), delta.cols());
    if table.r.nrows() != t1 + 1 || table.r.ncols() != t2 + 1 {
        return Err(AlignError::ShapeMismatch {
            table: (table.r.nrows(), table.r.ncols()),
            cost: (t1, t2),
        });
    }

    // Virtual border at i = T1+1 / j = T2+1: r = -inf, e = 0, delta = 0,
    // except the corner which carries r[T1][T2] and e = 1.
    let d = delta.view();
    let r_at = |i: usize, j: usize| -> f64 {
        if i == t1 + 1 && j == t2 + 1 {
            table.r[[t1, t2]]
        } else if i == t1 + 1 || j == t2 + 1 {
            f64::NEG_INFINITY
        } else {
            table.r[[i, j]]
        }
    };
    let d_at = |i: usize, j: usize| -> f64 {
        if i > t1 || j > t2 {
            0.0
        } else {
            d[[i - 1, j - 1]]
        }
    };

    let mut e = Array2::zeros((t1 + 2, t2 + 2));
    e[[t1 + 1, t2 + 1]] = 1.0;
    for i in (1..=t1).rev() {
        for j in (1..=t2).rev() {
            let rij = table.r[[i, j]];
            let a = ((r_at(i + 1, j) - rij - d_at(i + 1, j)) / beta).exp();
            let b = ((r_at(i, j + 1) - rij - d_at(i, j + 1)) / beta).exp();
            let c = ((r_at(i + 1, j + 1) - rij - d_at(i + 1, j + 1)) / beta).exp();
            e[[i, j]] = a * e[[i + 1, j]] + b * e[[i, j + 1]] + c * e[[i + 1, j + 1]];
        }
    }
    Ok(AlignmentGradient { e: e.slice(ndarray::s![1..=t1, 1..=t2]).to_owned() })
}

/// Value and gradient for a batch of independent cost matrices, evaluated in
/// parallel. Entries come back in input order.
pub fn sdtw_batch(deltas: &[CostMatrix], beta: f64) -> Result<Vec<(f64, AlignmentGradient)>> {
    deltas
        .par_iter()
        .map(|delta| {
            let (value, table) = sdtw_forward(delta, beta)?;
            let grad = sdtw_backward(delta, &table, beta)?;
            Ok((value, grad))
        })
        .collect()
}

const ENUMERATION_GUARD: f64 = 1e6;

/// Number of monotone paths as an f64, for guard checks only.
fn delannoy_count_f64(t1: usize, t2: usize) -> f64 {
    let mut prev = vec![1.0f64; t2];
    let mut cur = vec![1.0f64; t2];
    for _ in 1..t1 {
        cur[0] = 1.0;
        for j in 1..t2 {
            cur[j] = prev[j] + cur[j - 1] + prev[j - 1];
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[t2 - 1]
}

/// Enumerate every monotone alignment matrix from `(1, 1)` to `(T1, T2)` built
/// from right, down and diagonal steps. Exactly `D(T1, T2)` matrices, guarded
/// at 1e6.
pub fn enumerate_alignments(t1: usize, t2: usize) -> Result<Vec<Array2<f64>>> {
    if t1 == 0 || t2 == 0 {
        return Err(AlignError::EmptyCost);
    }
    let count = delannoy_count_f64(t1, t2);
    if count > ENUMERATION_GUARD {
        return Err(AlignError::EnumerationGuard { t1, t2, count, guard: ENUMERATION_GUARD });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current = Array2::zeros((t1, t2));
    current[[0, 0]] = 1.0;
    extend_paths(&mut current, 0, 0, t1, t2, &mut out);
    debug_assert_eq!(out.len() as f64, count);
    Ok(out)
}

fn extend_paths(
    current: &mut Array2<f64>,
    i: usize,
    j: usize,
    t1: usize,
    t2: usize,
    out: &mut Vec<Array2<f64>>,
) {
    if i == t1 - 1 && j == t2 - 1 {
        out.push(current.clone());
        return;
    }
    // Steps: right, down, diagonal.
    if j + 1 < t2 {
        current[[i, j + 1]] = 1.0;
        extend_paths(current, i, j + 1, t1, t2, out);
        current[[i, j + 1]] = 0.0;
    }
    if i + 1 < t1 {
        current[[i + 1, j]] = 1.0;
        extend_paths(current, i + 1, j, t1, t2, out);
        current[[i + 1, j]] = 0.0;
    }
    if i + 1 < t1 && j + 1 < t2 {
        current[[i + 1, j + 1]] = 1.0;
        extend_paths(current, i + 1, j + 1, t1, t2, out);
        current[[i + 1, j + 1]] = 0.0;
    }
}

/// Direct evaluation of sdtw over the enumerated alignment set: the softmin of
/// all path costs and the Gibbs average of the alignment matrices. At
/// `beta = 0` the average is uniform over the minimizing paths (the Gibbs
/// limit). Independent of the dynamic programs; guarded like
/// [`enumerate_alignments`].
pub fn sdtw_bruteforce(delta: &CostMatrix, beta: f64) -> Result<(f64, AlignmentGradient)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(AlignError::InvalidBeta(beta, "non-negative and finite"));
    }
    let paths = enumerate_alignments(delta.rows(), delta.cols())?;
    let costs: Vec<f64> = paths.iter().map(|a| (a * &delta.delta).sum()).collect();
    let value = softmin(&costs, beta)?;

    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut e = Array2::zeros((delta.rows(), delta.cols()));
    let mut total = 0.0;
    for (a, &cost) in paths.iter().zip(&costs) {
        let w = if beta == 0.0 {
            if cost == min {
                1.0
            } else {
                0.0
            }
        } else {
            (-(cost - min) / beta).exp()
        };
        if w > 0.0 {
            e.scaled_add(w, a);
            total += w;
        }
    }
    e.mapv_inplace(|v| v / total);
    Ok((value, AlignmentGradient { e }))
}
