//! Fréchet means: debiased transport barycenters, the alternating Soft-DTW
//! barycenter, and their composition (the STA barycenter).
//!
//! The transport barycenter minimizes `J(x) = sum_k w_k uot~(x_k, x)` by a
//! joint Sinkhorn fixed point over the pair scalings `(a_k, b_k)`, the
//! symmetric potential `c` and the barycenter itself:
//!
//! ```text
//! a_k = (x_k / K b_k)^w,   xbar = c^{1/w} (sum_k w_k (K a_k)^{1-w})^{1/(1-w)},
//! b_k = (xbar / K a_k)^w,  c = (xbar / K c)^w
//! ```
//!
//! Freezing `c = 1` drops the debiasing and recovers the plain unbalanced
//! barycenter sweep. Any stationary point of `J` is a global minimum, so the
//! sup-norm gradient from the final scalings doubles as a certificate.
//!
//! The Soft-DTW barycenter alternates between (1) soft alignment matrices
//! `Z_i = w_i E_i` against the current barycenter and (2) per-frame weighted
//! Fréchet means under the chosen ground cost, with the alignment weights
//! fixed. Both the cost and the per-frame mean are pluggable, which keeps the
//! scalar sanity configuration (squared differences + arithmetic means) and
//! the transport configuration on the same code path.

use crate::align::{sdtw_backward, sdtw_forward, AlignError, CostMatrix};
use crate::geometry::GroundGeometry;
use crate::math::{logsumexp, sup_gap};
use crate::measure::{Measure, MeasureError, MeasureSeries};
use crate::uot::{
    debiased_uot, sinkhorn_uot, symmetric_sinkhorn, PairwiseUot, UotError, UotParams,
};
use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BarycenterError {
    #[error("barycenter requires at least one input")]
    NoInputs,
    #[error("got {weights} weights for {inputs} inputs")]
    WeightCount { weights: usize, inputs: usize },
    #[error("weight {index} = {value} must be strictly positive and finite")]
    InvalidWeight { index: usize, value: f64 },
    #[error("input {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, got: usize, expected: usize },
    #[error("initial barycenter has shape ({t}, {p}), expected ({expected_t}, {expected_p})")]
    BadInit { t: usize, p: usize, expected_t: usize, expected_p: usize },
    #[error("output length t_out must be at least 1")]
    EmptyOutput,
    #[error("inner solver failed at outer iteration {outer}, frame {frame}: {source}")]
    InnerSolve { outer: usize, frame: usize, source: UotError },
    #[error(transparent)]
    Uot(#[from] UotError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

pub type Result<T> = std::result::Result<T, BarycenterError>;

/// Strictly positive weights, normalized to sum to one. The minimizer is
/// invariant to the overall scale, so normalization is safe.
pub fn normalize_weights(weights: &[f64], inputs: usize) -> Result<Vec<f64>> {
    if inputs == 0 {
        return Err(BarycenterError::NoInputs);
    }
    if weights.len() != inputs {
        return Err(BarycenterError::WeightCount { weights: weights.len(), inputs });
    }
    for (i, &w) in weights.iter().enumerate() {
        if !(w > 0.0) || !w.is_finite() {
            return Err(BarycenterError::InvalidWeight { index: i, value: w });
        }
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone)]
pub struct BaryDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Final sup-norm change of `log xbar`.
    pub last_change: f64,
    /// `max_i |grad J(xbar)_i|` evaluated from the final loop scalings.
    pub grad_inf_norm: f64,
}

/// Warm-start state for repeated barycenter solves (outer STA iterations).
#[derive(Debug, Clone)]
pub struct UotBaryState {
    pub log_b: Vec<Vec<f64>>,
    pub log_c: Vec<f64>,
}

/// Debiased barycenter of `inputs` under the shared geometry: runs the joint
/// sweep above in the log domain until the sup-norm change of `log xbar`
/// reaches `params.tol`.
pub fn debiased_uot_barycenter(
    inputs: &[Measure],
    weights: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
) -> Result<(Measure, BaryDiagnostics)> {
    let (m, d, _) = uot_barycenter_impl(inputs, weights, geom, params, true, None)?;
    Ok((m, d))
}

/// Same sweep with the symmetric potential frozen at one: the biased
/// unbalanced barycenter (kept for comparison; it blurs with epsilon).
pub fn uot_barycenter_biased(
    inputs: &[Measure],
    weights: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
) -> Result<(Measure, BaryDiagnostics)> {
    let (m, d, _) = uot_barycenter_impl(inputs, weights, geom, params, false, None)?;
    Ok((m, d))
}

pub(crate) fn uot_barycenter_impl(
    inputs: &[Measure],
    weights: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
    debias: bool,
    warm: Option<UotBaryState>,
) -> Result<(Measure, BaryDiagnostics, UotBaryState)> {
    let weights = normalize_weights(weights, inputs.len())?;
    let p = geom.p();
    for (index, m) in inputs.iter().enumerate() {
        if m.len() != p {
            return Err(BarycenterError::DimensionMismatch { index, got: m.len(), expected: p });
        }
    }
    let n = inputs.len();
    let omega = params.omega;
    let log_inputs: Vec<Vec<f64>> = inputs.iter().map(|m| m.log_weights()).collect();

    let (mut log_b, mut log_c) = match warm {
        Some(s) if s.log_b.len() == n && s.log_c.len() == p => (s.log_b, s.log_c),
        _ => (vec![vec![0.0; p]; n], vec![0.0; p]),
    };
    let mut log_xbar = vec![0.0; p];
    let mut have_xbar = false;
    let mut log_ka: Vec<Vec<f64>> = vec![Vec::new(); n];

    let mut iterations = 0;
    let mut converged = false;
    let mut change = f64::INFINITY;
    let mut lse_buf = vec![0.0; n];

    // Serial below this size: the per-iteration tasks are too small to pay
    // rayon's dispatch cost.
    let parallel = n * p >= 4096;

    while iterations < params.max_iter {
        iterations += 1;
        let step_a = |k: usize| -> Vec<f64> {
            let log_kb = geom.kernel_log_apply(&log_b[k]);
            (0..p).map(|i| omega * (log_inputs[k][i] - log_kb[i])).collect()
        };
        let log_a: Vec<Vec<f64>> = if parallel {
            (0..n).into_par_iter().map(step_a).collect()
        } else {
            (0..n).map(step_a).collect()
        };
        log_ka = if parallel {
            log_a.par_iter().map(|a| geom.kernel_log_apply(a)).collect()
        } else {
            log_a.iter().map(|a| geom.kernel_log_apply(a)).collect()
        };

        let mut new_xbar = vec![0.0; p];
        for i in 0..p {
            for k in 0..n {
                lse_buf[k] = weights[k].ln() + (1.0 - omega) * log_ka[k][i];
            }
            let mut v = logsumexp(&lse_buf) / (1.0 - omega);
            if debias {
                v += log_c[i] / omega;
            }
            new_xbar[i] = v;
        }
        change = if have_xbar { sup_gap(&new_xbar, &log_xbar) } else { f64::INFINITY };
        log_xbar = new_xbar;
        have_xbar = true;

        for k in 0..n {
            for j in 0..p {
                log_b[k][j] = omega * (log_xbar[j] - log_ka[k][j]);
            }
        }
        if debias {
            // Averaged update, as in the standalone symmetric solver: the
            // plain assignment leaves a near-unit oscillation mode in the
            // joint iteration (sweep change decays like 1/n); halving the
            // step removes it and keeps the same fixed point.
            let log_kc = geom.kernel_log_apply(&log_c);
            for i in 0..p {
                log_c[i] = 0.5 * (log_c[i] + omega * (log_xbar[i] - log_kc[i]));
            }
        }
        if change <= params.tol {
            converged = true;
            break;
        }
    }

    // Gradient certificate from the final scalings:
    // grad J = gamma (c^{-eps/gamma} - sum_k w_k b_k^{-eps/gamma}).
    let rate = params.epsilon / params.gamma;
    let mut grad_inf: f64 = 0.0;
    for i in 0..p {
        let c_term = if debias { (-rate * log_c[i]).exp() } else { 1.0 };
        let mut b_sum = 0.0;
        for k in 0..n {
            b_sum += weights[k] * (-rate * log_b[k][i]).exp();
        }
        grad_inf = grad_inf.max((params.gamma * (c_term - b_sum)).abs());
    }

    let bary = Measure::new(Array1::from_iter(log_xbar.iter().map(|&l| l.exp())))?;
    let diag = BaryDiagnostics { iterations, converged, last_change: change, grad_inf_norm: grad_inf };
    Ok((bary, diag, UotBaryState { log_b, log_c }))
}

/// Gradient of `J(x) = sum_k w_k uot~(x_k, x)` at an arbitrary point,
/// re-solving the per-input duals and the symmetric potential of `xbar` to
/// `params.tol`: `grad J = gamma (c^{-eps/gamma} - sum_k w_k b_k^{-eps/gamma})`.
pub fn grad_j(
    xbar: &Measure,
    inputs: &[Measure],
    weights: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
) -> Result<Vec<f64>> {
    let weights = normalize_weights(weights, inputs.len())?;
    let solves: Result<Vec<Vec<f64>>> = inputs
        .par_iter()
        .map(|xk| {
            let (duals, _) = sinkhorn_uot(xk, xbar, geom, params)?;
            if !duals.converged {
                return Err(UotError::Unconverged { gap: duals.marginal_gap, tol: params.tol }.into());
            }
            Ok(duals.log_b)
        })
        .collect();
    let log_bs = solves?;
    let (sym, _) = symmetric_sinkhorn(xbar, geom, params)?;
    if !sym.converged {
        return Err(UotError::Unconverged { gap: sym.residual, tol: params.tol }.into());
    }
    let rate = params.epsilon / params.gamma;
    let p = geom.p();
    let mut grad = vec![0.0; p];
    for i in 0..p {
        let mut b_sum = 0.0;
        for (k, log_b) in log_bs.iter().enumerate() {
            b_sum += weights[k] * (-rate * log_b[i]).exp();
        }
        grad[i] = params.gamma * ((-rate * sym.log_c[i]).exp() - b_sum);
    }
    Ok(grad)
}

/// `J(xbar) = sum_k w_k uot~(x_k, xbar)`, for perturbation checks.
pub fn uot_barycenter_objective(
    xbar: &Measure,
    inputs: &[Measure],
    weights: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
) -> Result<f64> {
    let weights = normalize_weights(weights, inputs.len())?;
    let mut total = 0.0;
    for (xk, w) in inputs.iter().zip(&weights) {
        total += w * debiased_uot(xk, xbar, geom, params)?;
    }
    Ok(total)
}

/// Configuration of the alternating Soft-DTW barycenter loop.
#[derive(Debug, Clone, Copy)]
pub struct SdtwBaryConfig {
    pub beta: f64,
    pub t_out: usize,
    /// Stop when the objective decrease falls to `rel_tol * (1 + |prev|)`.
    pub rel_tol: f64,
    pub max_outer: usize,
}

impl SdtwBaryConfig {
    pub fn new(beta: f64, t_out: usize) -> Self {
        Self { beta, t_out, rel_tol: 1e-5, max_outer: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct SdtwBaryDiagnostics {
    /// Objective `sum_i w_i sdtw(x_i, x)` at the start of each outer iteration.
    pub objectives: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Alternating minimization for the Soft-DTW barycenter with a pluggable
/// ground cost. Per outer iteration: compute `Delta(x_i, x)` and the soft
/// alignments `Z_i = w_i E_i`, then re-solve every output frame as the
/// weighted Fréchet mean of the input frames under the column weights
/// `Z_i[., t]` (normalized; exact zeros dropped). A frame whose weight column
/// sums below 1e-12 keeps its previous value and emits a warning.
///
/// `cost_oracle(i, input, bary)` produces the `T_i x t_out` cost;
/// `inner_mean(t, support, frames, weights)` returns the new frame `t`, where
/// `support[j] = (input index, input frame)` identifies `frames[j]`;
/// `post_iter` runs after each barycenter update (prefix clamping hooks).
/// The loss is not jointly convex, so the result depends on `x0`.
pub fn sdtw_barycenter<C, M, P>(
    inputs: &[MeasureSeries],
    weights: &[f64],
    cfg: &SdtwBaryConfig,
    x0: &MeasureSeries,
    mut cost_oracle: C,
    mut inner_mean: M,
    mut post_iter: P,
) -> Result<(MeasureSeries, SdtwBaryDiagnostics)>
where
    C: FnMut(usize, &MeasureSeries, &MeasureSeries) -> Result<CostMatrix>,
    M: FnMut(usize, &[(usize, usize)], &[ArrayView1<'_, f64>], &[f64]) -> Result<Array1<f64>>,
    P: FnMut(&mut Array2<f64>),
{
    let weights = normalize_weights(weights, inputs.len())?;
    if cfg.t_out == 0 {
        return Err(BarycenterError::EmptyOutput);
    }
    let p = inputs[0].dim_p();
    for (index, s) in inputs.iter().enumerate() {
        if s.dim_p() != p {
            return Err(BarycenterError::DimensionMismatch { index, got: s.dim_p(), expected: p });
        }
    }
    if x0.len_t() != cfg.t_out || x0.dim_p() != p {
        return Err(BarycenterError::BadInit {
            t: x0.len_t(),
            p: x0.dim_p(),
            expected_t: cfg.t_out,
            expected_p: p,
        });
    }

    let mut bary = x0.clone();
    let mut objectives = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut outer_done = 0;

    for outer in 0..cfg.max_outer {
        let mut costs = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            costs.push(cost_oracle(i, input, &bary)?);
        }
        let solved: Result<Vec<(f64, crate::align::ForwardTable)>> =
            costs.par_iter().map(|c| Ok(sdtw_forward(c, cfg.beta)?)).collect();
        let solved = solved?;

        let objective: f64 =
            weights.iter().zip(&solved).map(|(w, (v, _))| w * v).sum();
        objectives.push(objective);
        outer_done = outer + 1;
        if let Some(&prev) = objectives.len().checked_sub(2).map(|i| &objectives[i]) {
            if prev - objective <= cfg.rel_tol * (1.0 + prev.abs()) {
                converged = true;
                break;
            }
        }

        let grads: Result<Vec<Array2<f64>>> = costs
            .par_iter()
            .zip(&solved)
            .map(|(c, (_, table))| Ok(sdtw_backward(c, table, cfg.beta)?.into_matrix()))
            .collect();
        let grads = grads?;

        let mut frames = bary.frames().clone();
        for t in 0..cfg.t_out {
            let mut support = Vec::new();
            let mut mu = Vec::new();
            let mut total = 0.0;
            for (i, grad) in grads.iter().enumerate() {
                for tp in 0..inputs[i].len_t() {
                    let z = weights[i] * grad[[tp, t]];
                    total += z;
                    if z > 0.0 {
                        support.push((i, tp));
                        mu.push(z);
                    }
                }
            }
            if total < 1e-12 {
                warnings.push(format!(
                    "outer {outer}: output frame {t} unreachable (weight mass {total:.3e}); kept previous value"
                ));
                continue;
            }
            for m in mu.iter_mut() {
                *m /= total;
            }
            let views: Vec<ArrayView1<'_, f64>> =
                support.iter().map(|&(i, tp)| inputs[i].frame(tp)).collect();
            let new_frame = inner_mean(t, &support, &views, &mu)?;
            frames.row_mut(t).assign(&new_frame);
        }
        post_iter(&mut frames);
        bary = MeasureSeries::new(frames)?;
    }

    Ok((bary, SdtwBaryDiagnostics { objectives, outer_iterations: outer_done, converged, warnings }))
}

/// Soft-DTW distance with the debiased transport cost between frames:
/// builds the pairwise cost matrix (batched Sinkhorn solves) and runs the
/// forward DP.
pub fn sta_distance(
    x: &MeasureSeries,
    y: &MeasureSeries,
    geom: &GroundGeometry,
    params: &UotParams,
    beta: f64,
) -> Result<f64> {
    let cost = crate::uot::debiased_uot_matrix(x, y, geom, params)?;
    let (value, _) = sdtw_forward(&CostMatrix::new(cost)?, beta)?;
    Ok(value)
}

/// Configuration of the spatio-temporal barycenter.
#[derive(Debug, Clone, Copy)]
pub struct StaBaryConfig {
    pub params: UotParams,
    pub beta: f64,
    pub t_out: usize,
    pub rel_tol: f64,
    pub max_outer: usize,
    /// Inner-mean weights below `weight_prune * max` are dropped (and the
    /// rest renormalized) before the transport barycenter runs; the alignment
    /// matrices are banded, so most weights are negligible.
    pub weight_prune: f64,
}

impl StaBaryConfig {
    pub fn new(params: UotParams, beta: f64, t_out: usize) -> Self {
        Self { params, beta, t_out, rel_tol: 1e-5, max_outer: 50, weight_prune: 1e-7 }
    }
}

/// Spatio-temporal barycenter: the alternating Soft-DTW loop with the
/// debiased transport cost between frames and the debiased transport
/// barycenter as the per-frame mean. Dual variables are warm-started across
/// outer iterations. `x0` defaults to uniform frames carrying the mean input
/// frame mass.
pub fn sta_barycenter(
    inputs: &[MeasureSeries],
    weights: &[f64],
    geom: &GroundGeometry,
    cfg: &StaBaryConfig,
) -> Result<(MeasureSeries, SdtwBaryDiagnostics)> {
    sta_barycenter_with(inputs, weights, geom, cfg, None, |_| {})
}

pub fn sta_barycenter_with<P>(
    inputs: &[MeasureSeries],
    weights: &[f64],
    geom: &GroundGeometry,
    cfg: &StaBaryConfig,
    x0: Option<&MeasureSeries>,
    post_iter: P,
) -> Result<(MeasureSeries, SdtwBaryDiagnostics)>
where
    P: FnMut(&mut Array2<f64>),
{
    if inputs.is_empty() {
        return Err(BarycenterError::NoInputs);
    }
    let p = geom.p();
    let x0 = match x0 {
        Some(s) => s.clone(),
        None => {
            let mean_mass: f64 = inputs
                .iter()
                .map(|s| s.frames().sum() / s.len_t() as f64)
                .sum::<f64>()
                / inputs.len() as f64;
            MeasureSeries::new(Array2::from_elem((cfg.t_out, p), mean_mass / p as f64))?
        }
    };

    let mut pairwise: Vec<PairwiseUot<'_>> =
        inputs.iter().map(|_| PairwiseUot::new(geom, cfg.params)).collect();
    let mut frame_state: HashMap<usize, UotBaryState> = HashMap::new();
    let sdtw_cfg = SdtwBaryConfig {
        beta: cfg.beta,
        t_out: cfg.t_out,
        rel_tol: cfg.rel_tol,
        max_outer: cfg.max_outer,
    };
    let params = cfg.params;
    let prune = cfg.weight_prune;

    sdtw_barycenter(
        inputs,
        weights,
        &sdtw_cfg,
        &x0,
        |i, input, bary| Ok(CostMatrix::new(pairwise[i].cost_matrix(input, bary)?)?),
        |t, support, frames, mu| {
            // Prune negligible alignment weights and renormalize.
            let max_mu = mu.iter().copied().fold(0.0f64, f64::max);
            let mut kept_frames = Vec::new();
            let mut kept_mu = Vec::new();
            let mut kept_idx = Vec::new();
            for (j, &m) in mu.iter().enumerate() {
                if m >= prune * max_mu {
                    kept_frames.push(Measure::new(frames[j].to_owned())?);
                    kept_mu.push(m);
                    kept_idx.push(support[j]);
                }
            }
            let total: f64 = kept_mu.iter().sum();
            for m in kept_mu.iter_mut() {
                *m /= total;
            }
            // Warm start from the previous outer iteration when the kept
            // support matches; otherwise start fresh.
            let warm = frame_state.remove(&t).filter(|s| s.log_b.len() == kept_frames.len());
            let (measure, _diag, state) =
                uot_barycenter_impl(&kept_frames, &kept_mu, geom, &params, true, warm)
                    .map_err(|e| match e {
                        BarycenterError::Uot(source) => {
                            BarycenterError::InnerSolve { outer: 0, frame: t, source }
                        }
                        other => other,
                    })?;
            frame_state.insert(t, state);
            Ok(measure.weights().to_owned())
        },
        post_iter,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_epsilon;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn line_geometry(p: usize, epsilon: f64) -> GroundGeometry {
        GroundGeometry::grid(1, p, true, epsilon).unwrap()
    }

    fn gaussian_measure(p: usize, center: f64, sigma: f64, mass: f64) -> Measure {
        let mut w = Array1::from_shape_fn(p, |i| {
            let d = (i as f64 - center) / sigma;
            (-0.5 * d * d).exp()
        });
        let total = w.sum();
        w.mapv_inplace(|v| v * mass / total);
        Measure::new(w).unwrap()
    }

    fn spatial_variance(m: &Measure) -> f64 {
        let w = m.weights();
        let total = m.mass();
        let mean: f64 = w.iter().enumerate().map(|(i, &v)| i as f64 * v).sum::<f64>() / total;
        w.iter().enumerate().map(|(i, &v)| v * (i as f64 - mean).powi(2)).sum::<f64>() / total
    }

    #[test]
    fn weights_are_normalized_and_validated() {
        let w = normalize_weights(&[2.0, 6.0], 2).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!(matches!(normalize_weights(&[1.0], 2), Err(BarycenterError::WeightCount { .. })));
        assert!(matches!(
            normalize_weights(&[1.0, 0.0], 2),
            Err(BarycenterError::InvalidWeight { index: 1, .. })
        ));
        assert!(matches!(normalize_weights(&[], 0), Err(BarycenterError::NoInputs)));
    }

    #[test]
    fn identical_inputs_return_the_input() {
        let p = 24;
        let eps = default_epsilon(p);
        let geom = line_geometry(p, eps);
        let params = UotParams::new(eps, 1.0).unwrap().with_tol(1e-7).unwrap().with_max_iter(30000).unwrap();
        let x = gaussian_measure(p, 10.0, 2.5, 1.3);
        let inputs = vec![x.clone(), x.clone(), x.clone()];
        let (bary, diag) = debiased_uot_barycenter(&inputs, &[0.2, 0.5, 0.3], &geom, &params).unwrap();
        assert!(diag.converged);
        let gap = x
            .weights()
            .iter()
            .zip(bary.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(gap < 1e-6, "sup gap {gap}");
    }

    #[test]
    fn scalar_single_input_fixed_point_returns_the_mass() {
        let geom = GroundGeometry::from_cost(Array2::zeros((1, 1)), 1.0).unwrap();
        let params = UotParams::new(1.0, 2.0).unwrap().with_tol(1e-12).unwrap();
        let x = Measure::from_vec(vec![1.7]).unwrap();
        let (bary, diag) = debiased_uot_barycenter(&[x], &[1.0], &geom, &params).unwrap();
        assert!(diag.converged);
        assert!((bary.weights()[0] - 1.7).abs() < 1e-8);
    }

    #[test]
    fn one_sweep_of_debiased_equals_biased() {
        // With c initialized at one, the first barycenter update of the two
        // variants is the same formula; outputs must agree bitwise.
        let p = 12;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 1.0).unwrap().with_max_iter(1).unwrap();
        let a = gaussian_measure(p, 3.0, 1.5, 1.0);
        let b = gaussian_measure(p, 8.0, 2.0, 1.4);
        let inputs = vec![a, b];
        let w = [0.6, 0.4];
        let (d, _) = debiased_uot_barycenter(&inputs, &w, &geom, &params).unwrap();
        let (u, _) = uot_barycenter_biased(&inputs, &w, &geom, &params).unwrap();
        assert_eq!(d.weights(), u.weights());
    }

    #[test]
    fn debiased_is_sharper_than_biased_on_translated_gaussians() {
        // Per-epsilon tolerances: the sharp modes of the barycenter are pinned
        // only through the kernel spectrum, so wide kernels equilibrate slowly.
        let p = 32;
        let x1 = gaussian_measure(p, 9.0, 2.0, 1.0);
        let x2 = gaussian_measure(p, 22.0, 2.0, 1.2);
        let inputs = vec![x1, x2];
        let w = [0.5, 0.5];
        for &(eps, tol) in &[(0.25, 2e-5), (0.1, 2e-5), (default_epsilon(p), 5e-5)] {
            let geom = line_geometry(p, eps);
            let params = UotParams::new(eps, 1.0).unwrap().with_tol(tol).unwrap().with_max_iter(60000).unwrap();
            let (debiased, dd) = debiased_uot_barycenter(&inputs, &w, &geom, &params).unwrap();
            let (biased, bd) = uot_barycenter_biased(&inputs, &w, &geom, &params).unwrap();
            assert!(dd.converged && bd.converged, "eps={eps}");
            let (vd, vb) = (spatial_variance(&debiased), spatial_variance(&biased));
            assert!(vd < vb, "eps={eps}: debiased variance {vd} vs biased {vb}");
        }
    }

    #[test]
    fn biased_blur_shrinks_with_epsilon() {
        // A single input: the biased barycenter is a kernel-blurred copy and
        // tightens toward the input as epsilon decreases.
        let p = 32;
        let x = gaussian_measure(p, 16.0, 2.0, 1.0);
        let base = spatial_variance(&x);
        let mut excesses = Vec::new();
        for &eps in &[0.5, 0.1, 0.02] {
            let geom = line_geometry(p, eps);
            let params = UotParams::new(eps, 1.0).unwrap().with_tol(1e-9).unwrap().with_max_iter(50000).unwrap();
            let (biased, _) = uot_barycenter_biased(&[x.clone()], &[1.0], &geom, &params).unwrap();
            let excess = spatial_variance(&biased) - base;
            assert!(excess > 0.0, "eps={eps}: biased variance should exceed the input's");
            excesses.push(excess);
        }
        assert!(excesses[1] < excesses[0] && excesses[2] < excesses[1], "{excesses:?}");
        // The blur tracks the kernel width, so the gap collapses with epsilon.
        assert!(excesses[2] < 0.2 * excesses[0], "{excesses:?}");
    }

    #[test]
    fn stationarity_certificate_at_the_output() {
        // Unnormalized line costs keep the kernel about one cell wide, the
        // regime where every mode of the fixed point contracts briskly.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = 16;
        let cost = crate::geometry::grid_cost_2d(1, p, false).unwrap();
        let geom = GroundGeometry::from_cost(cost, 0.5).unwrap();
        let params = UotParams::new(0.5, 1.0).unwrap().with_tol(1e-8).unwrap().with_max_iter(20000).unwrap();
        let inputs: Vec<Measure> = (0..3)
            .map(|_| {
                Measure::new(Array1::from_shape_fn(p, |_| rng.random_range(0.05..1.0))).unwrap()
            })
            .collect();
        let w = [0.3, 0.3, 0.4];
        let (bary, diag) = debiased_uot_barycenter(&inputs, &w, &geom, &params).unwrap();
        assert!(diag.converged);
        assert!(diag.grad_inf_norm <= 10.0 * params.tol * params.gamma, "{}", diag.grad_inf_norm);
        // Independent re-solve of the gradient at the output.
        let grad = grad_j(&bary, &inputs, &w, &geom, &params).unwrap();
        let ginf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(ginf <= 10.0 * params.tol * params.gamma, "{ginf}");
    }

    #[test]
    fn objective_does_not_improve_under_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let p = 10;
        let geom = line_geometry(p, 0.15);
        // Coarse tolerance for the barycenter loop, tight for the pair solves
        // that evaluate J.
        let params = UotParams::new(0.15, 1.0).unwrap().with_tol(1e-6).unwrap().with_max_iter(30000).unwrap();
        let eval = params.with_tol(1e-10).unwrap();
        let inputs: Vec<Measure> = (0..2)
            .map(|_| Measure::new(Array1::from_shape_fn(p, |_| rng.random_range(0.1..1.0))).unwrap())
            .collect();
        let w = [0.5, 0.5];
        let (bary, _) = debiased_uot_barycenter(&inputs, &w, &geom, &params).unwrap();
        let j0 = uot_barycenter_objective(&bary, &inputs, &w, &geom, &eval).unwrap();
        for _ in 0..20 {
            let delta = Array1::from_shape_fn(p, |_| rng.random_range(-1.0f64..1.0)* 1e-2);
            let perturbed = Measure::new(
                (bary.weights().to_owned() + &delta).mapv(|v| v.max(1e-9)),
            )
            .unwrap();
            let j = uot_barycenter_objective(&perturbed, &inputs, &w, &geom, &eval).unwrap();
            assert!(j >= j0 - 1e-7, "perturbed {j} < optimal {j0}");
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let p = 14;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 1.0).unwrap().with_tol(1e-7).unwrap().with_max_iter(3000).unwrap();
        let a = gaussian_measure(p, 4.0, 1.5, 1.0);
        let b = gaussian_measure(p, 9.0, 2.0, 0.8);
        let inputs = vec![a, b];
        let (x1, _) = debiased_uot_barycenter(&inputs, &[0.3, 0.7], &geom, &params).unwrap();
        let (x2, _) = debiased_uot_barycenter(&inputs, &[3.0, 7.0], &geom, &params).unwrap();
        for (u, v) in x1.weights().iter().zip(x2.weights()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn grad_j_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = 5;
        let geom = line_geometry(p, 0.3);
        let params = UotParams::new(0.3, 1.0).unwrap().with_tol(1e-11).unwrap().with_max_iter(50000).unwrap();
        let inputs: Vec<Measure> = (0..2)
            .map(|_| Measure::new(Array1::from_shape_fn(p, |_| rng.random_range(0.2..1.0))).unwrap())
            .collect();
        let w = [0.5, 0.5];
        let xbar =
            Measure::new(Array1::from_shape_fn(p, |_| rng.random_range(0.3..1.0))).unwrap();
        let grad = grad_j(&xbar, &inputs, &w, &geom, &params).unwrap();
        let h = 1e-4;
        for dir in 0..3 {
            let d = Array1::from_shape_fn(p, |i| {
                if i % 3 == dir {
                    1.0
                } else {
                    -0.5
                }
            });
            let step = d.mapv(|v| v * h);
            let xp = Measure::new(xbar.weights().to_owned() + &step).unwrap();
            let xm = Measure::new(xbar.weights().to_owned() - &step).unwrap();
            let jp = uot_barycenter_objective(&xp, &inputs, &w, &geom, &params).unwrap();
            let jm = uot_barycenter_objective(&xm, &inputs, &w, &geom, &params).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            let analytic: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
            assert!(
                (fd - analytic).abs() <= 1e-3 * (1.0 + analytic.abs()),
                "dir {dir}: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn grad_j_is_an_ascent_direction_off_optimum() {
        let p = 8;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 1.0).unwrap().with_tol(1e-10).unwrap().with_max_iter(30000).unwrap();
        let inputs = vec![gaussian_measure(p, 2.0, 1.0, 1.0), gaussian_measure(p, 5.0, 1.0, 1.0)];
        let w = [0.5, 0.5];
        let xbar = gaussian_measure(p, 6.5, 1.5, 0.9);
        let grad = grad_j(&xbar, &inputs, &w, &geom, &params).unwrap();
        let j0 = uot_barycenter_objective(&xbar, &inputs, &w, &geom, &params).unwrap();
        let t = 1e-4;
        let stepped = Measure::new(
            xbar.weights()
                .iter()
                .zip(&grad)
                .map(|(x, g)| (x + t * g).max(1e-12))
                .collect::<Array1<f64>>(),
        )
        .unwrap();
        let j1 = uot_barycenter_objective(&stepped, &inputs, &w, &geom, &params).unwrap();
        assert!(j1 > j0, "{j1} <= {j0}");
    }

    // Scalar sanity configuration of the alternating loop: squared-difference
    // costs, arithmetic-mean inner oracle.
    fn scalar_cost(input: &MeasureSeries, bary: &MeasureSeries) -> CostMatrix {
        let mut delta = Array2::zeros((input.len_t(), bary.len_t()));
        for i in 0..input.len_t() {
            for j in 0..bary.len_t() {
                let d = input.frame(i)[0] - bary.frame(j)[0];
                delta[[i, j]] = d * d;
            }
        }
        CostMatrix::new(delta).unwrap()
    }

    fn run_scalar_barycenter(
        inputs: &[MeasureSeries],
        weights: &[f64],
        cfg: &SdtwBaryConfig,
        x0: &MeasureSeries,
    ) -> (MeasureSeries, SdtwBaryDiagnostics) {
        sdtw_barycenter(
            inputs,
            weights,
            cfg,
            x0,
            |_, input, bary| Ok(scalar_cost(input, bary)),
            |_, _, frames, mu| {
                let mut acc = 0.0;
                for (f, m) in frames.iter().zip(mu) {
                    acc += f[0] * m;
                }
                Ok(array![acc])
            },
            |_| {},
        )
        .unwrap()
    }

    #[test]
    fn single_input_is_a_fixed_point() {
        // At small beta the self-alignment concentrates on the diagonal path,
        // so every frame's mean is the frame itself. (At larger beta the
        // Gibbs average mixes neighboring frames and the minimizer of
        // sdtw(x, .) genuinely differs from x.)
        let x = MeasureSeries::new(array![[0.2], [0.9], [1.5], [0.4]]).unwrap();
        let cfg = SdtwBaryConfig::new(0.02, 4);
        let (bary, diag) = run_scalar_barycenter(&[x.clone()], &[1.0], &cfg, &x);
        assert!(diag.converged);
        for t in 0..4 {
            assert!((bary.frame(t)[0] - x.frame(t)[0]).abs() < 1e-6, "frame {t}");
        }
    }

    #[test]
    fn scalar_objective_decreases_and_matches_direct_evaluation() {
        let inputs = vec![
            MeasureSeries::new(array![[0.1], [0.8], [1.6], [0.9], [0.2]]).unwrap(),
            MeasureSeries::new(array![[0.2], [0.3], [1.4], [1.2], [0.1]]).unwrap(),
            MeasureSeries::new(array![[0.05], [1.0], [1.8], [0.7], [0.3]]).unwrap(),
        ];
        let w = [0.4, 0.3, 0.3];
        let cfg = SdtwBaryConfig { beta: 0.2, t_out: 5, rel_tol: 1e-8, max_outer: 40 };
        let x0 = MeasureSeries::new(Array2::from_elem((5, 1), 0.6)).unwrap();
        let (bary, diag) = run_scalar_barycenter(&inputs, &w, &cfg, &x0);

        for pair in diag.objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8, "{} -> {}", pair[0], pair[1]);
        }
        // The recorded objective equals a direct recomputation at the output.
        let direct: f64 = inputs
            .iter()
            .zip(normalize_weights(&w, 3).unwrap())
            .map(|(x, wi)| wi * sdtw_forward(&scalar_cost(x, &bary), cfg.beta).unwrap().0)
            .sum();
        let last = *diag.objectives.last().unwrap();
        assert!((direct - last).abs() <= 1e-6 * (1.0 + last.abs()), "{direct} vs {last}");
    }

    #[test]
    fn z_matrices_scale_with_input_weights() {
        // Z_i = w_i E_i: entries live in [0, w_i] and the corners equal w_i.
        let inputs = vec![
            MeasureSeries::new(array![[0.1], [0.9], [0.3]]).unwrap(),
            MeasureSeries::new(array![[0.4], [0.2], [1.1]]).unwrap(),
        ];
        let weights = normalize_weights(&[0.7, 0.3], 2).unwrap();
        let bary = MeasureSeries::new(array![[0.5], [0.6], [0.2]]).unwrap();
        let beta = 0.4;
        for (x, wi) in inputs.iter().zip(&weights) {
            let cost = scalar_cost(x, &bary);
            let (_, table) = sdtw_forward(&cost, beta).unwrap();
            let z = sdtw_backward(&cost, &table, beta).unwrap().into_matrix() * *wi;
            assert!((z[[0, 0]] - wi).abs() < 1e-10);
            assert!((z[[2, 2]] - wi).abs() < 1e-10);
            for &v in z.iter() {
                assert!(v >= -1e-12 && v <= wi + 1e-12);
            }
        }
    }

    fn blob_series(p: usize, t_len: usize, active: usize, site: usize) -> MeasureSeries {
        // Background mass everywhere, a spike at `site` during frame `active`.
        let mut frames = Array2::from_elem((t_len, p), 1e-3);
        frames[[active, site]] = 1.0;
        MeasureSeries::new(frames).unwrap()
    }

    #[test]
    fn sta_distance_of_constant_series_counts_paths() {
        let p = 8;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 1.0).unwrap().with_tol(1e-9).unwrap();
        let frames = Array2::from_shape_fn((5, p), |(_, j)| 0.1 + 0.05 * j as f64);
        let x = MeasureSeries::new(frames).unwrap();
        let beta = 0.3;
        let v = sta_distance(&x, &x, &geom, &params, beta).unwrap();
        let table = crate::delannoy::DelannoyTable::new(6);
        let expected = -beta * table.log(5, 5).unwrap();
        // Every pairwise cost is ~0, so the value reduces to the path count.
        assert!((v - expected).abs() < 1e-4 * (1.0 + expected.abs()), "{v} vs {expected}");
    }

    #[test]
    fn sta_distance_is_symmetric() {
        let p = 6;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 0.7).unwrap().with_tol(1e-9).unwrap();
        let x = blob_series(p, 4, 1, 1);
        let y = blob_series(p, 4, 2, 4);
        let beta = 0.5;
        let a = sta_distance(&x, &y, &geom, &params, beta).unwrap();
        let b = sta_distance(&y, &x, &geom, &params, beta).unwrap();
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
    }

    #[test]
    fn sta_distance_grows_with_temporal_shift_then_saturates() {
        let p = 6;
        let t_len = 40;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 1.0).unwrap().with_tol(1e-8).unwrap();
        let x = blob_series(p, t_len, 9, 2);
        // Resolve beta from the max pairwise cost at the largest shift.
        let probe = crate::uot::debiased_uot_matrix(&x, &blob_series(p, t_len, 29, 2), &geom, &params).unwrap();
        let r = probe.iter().copied().fold(0.0f64, f64::max);
        let k_max = 10;
        let beta = crate::delannoy::beta_heuristic(k_max, 0.01, r, t_len).unwrap();
        let base = sta_distance(&x, &x, &geom, &params, beta).unwrap();
        let mut gaps = Vec::new();
        for k in [2usize, 5, 8, 14, 20, 26] {
            let y = blob_series(p, t_len, 9 + k, 2);
            let v = sta_distance(&x, &y, &geom, &params, beta).unwrap();
            gaps.push(v - base);
        }
        // Growth below k_max.
        assert!(gaps[0] > 0.0);
        assert!(gaps[1] > gaps[0]);
        assert!(gaps[2] > gaps[1]);
        // Saturation past k_max: later increments are small against earlier ones.
        let early = gaps[2] - gaps[0];
        let late = gaps[5] - gaps[3];
        assert!(late < 0.2 * early, "early {early} late {late}");
    }

    #[test]
    fn sta_barycenter_of_identical_inputs_is_the_input() {
        let p = 8;
        let cost = crate::geometry::grid_cost_2d(1, p, false).unwrap();
        let geom = GroundGeometry::from_cost(cost, 0.5).unwrap();
        let params = UotParams::new(0.5, 1.0).unwrap().with_tol(1e-6).unwrap().with_max_iter(5000).unwrap();
        let x = blob_series(p, 5, 2, 3);
        let inputs = vec![x.clone(), x.clone()];
        // Small beta keeps the self-alignment concentrated on the diagonal;
        // larger temperatures genuinely mix neighboring frames.
        let mut cfg = StaBaryConfig::new(params, 0.05, 5);
        cfg.rel_tol = 1e-7;
        let (bary, diag) = sta_barycenter(&inputs, &[0.5, 0.5], &geom, &cfg).unwrap();
        assert!(diag.outer_iterations >= 2);
        for t in 0..5 {
            for j in 0..p {
                let (a, b) = (bary.frame(t)[j], x.frame(t)[j]);
                assert!((a - b).abs() <= 5e-3 * (1.0 + b.abs()), "frame {t} site {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sta_barycenter_objective_is_monotone() {
        let p = 10;
        let geom = line_geometry(p, 0.2);
        let params = UotParams::new(0.2, 0.5).unwrap().with_tol(1e-6).unwrap().with_max_iter(5000).unwrap();
        let inputs = vec![blob_series(p, 6, 1, 2), blob_series(p, 6, 3, 6), blob_series(p, 6, 2, 4)];
        let cfg = StaBaryConfig::new(params, 0.2, 6);
        let (_, diag) = sta_barycenter(&inputs, &[1.0, 1.0, 1.0], &geom, &cfg).unwrap();
        assert!(diag.objectives.len() >= 2);
        for pair in diag.objectives.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-5 + 1e-8, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn temporally_shifted_diracs_average_to_one_band() {
        // Two copies of a spike series shifted by +-2 frames: the barycenter
        // concentrates its largest frame masses in the band between them.
        let p = 6;
        let t_len = 11;
        let geom = line_geometry(p, 0.3);
        let params = UotParams::new(0.3, 1.0).unwrap().with_tol(1e-5).unwrap().with_max_iter(3000).unwrap();
        let a = blob_series(p, t_len, 3, 2);
        let b = blob_series(p, t_len, 7, 2);
        let r = 2.0 * params.gamma; // cost ceiling scale for a positive-mass spike
        let beta = crate::delannoy::beta_heuristic(6, 0.01, r, t_len).unwrap();
        let mut cfg = StaBaryConfig::new(params, beta, t_len);
        cfg.max_outer = 25;
        let (bary, _) = sta_barycenter(&[a, b], &[0.5, 0.5], &geom, &cfg).unwrap();
        let norms: Vec<f64> = (0..t_len).map(|t| bary.frame(t).dot(&bary.frame(t)).sqrt()).collect();
        let peak = norms
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert!((3..=7).contains(&peak), "peak at {peak}, profile {norms:?}");
    }
}
