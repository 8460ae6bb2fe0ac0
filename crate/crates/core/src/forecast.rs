//! Synthetic moving-blob dataset and the nearest-neighbor forecasting
//! pipeline: given the first `t0` frames of a query, find its `k` closest
//! series under a chosen loss, then predict the remaining frames as the
//! loss's barycenter of the neighbors with the observed prefix held fixed.
//!
//! Each dataset class is a distinct blob trajectory (line, arc, vee, loop);
//! samples perturb the template by an integer spatial shift and a temporal
//! crop: the motion is resampled to a random number of frames and re-embedded
//! at a random offset, holding the endpoint frames outside the active window.
//! Generation is deterministic in the seed.

use crate::barycenter::{
    debiased_uot_barycenter, sta_barycenter_with, BarycenterError, StaBaryConfig,
};
use crate::delannoy::{beta_heuristic, DelannoyError};
use crate::geometry::{GeometryError, GroundGeometry};
use crate::measure::{Measure, MeasureError, MeasureSeries};
use crate::uot::{debiased_uot, symmetric_sinkhorn, UotError, UotParams};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ForecastError {
    #[error("grid {h}x{w} cannot absorb spatial shifts up to {shift} (needs {needed} more cells)")]
    InfeasibleShift { h: usize, w: usize, shift: usize, needed: usize },
    #[error("temporal crop minimum {crop_min} must lie in [1, T] = [1, {t}]")]
    BadCrop { crop_min: usize, t: usize },
    #[error("prefix length t0 = {t0} must satisfy 1 <= t0 < T = {t}")]
    BadPrefix { t0: usize, t: usize },
    #[error("k = {k} neighbors requested from {available} candidates")]
    NotEnoughCandidates { k: usize, available: usize },
    #[error("sample {index} has shape ({t}, {p}), expected ({expected_t}, {expected_p})")]
    ShapeMismatch { index: usize, t: usize, p: usize, expected_t: usize, expected_p: usize },
    #[error("prediction and truth have different shapes")]
    ScoreShape,
    #[error(transparent)]
    Uot(#[from] UotError),
    #[error(transparent)]
    Barycenter(#[from] BarycenterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Beta(#[from] DelannoyError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

/// Generator configuration; also serves as the dataset's provenance record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub per_class: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub spatial_shift_max: usize,
    pub temporal_crop_min: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 25,
            t: 13,
            h: 30,
            w: 30,
            spatial_shift_max: 10,
            temporal_crop_min: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<MeasureSeries>,
    pub labels: Vec<usize>,
    pub grid: (usize, usize),
    pub provenance: GenConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// Trajectory templates in the unit square, one per class (cycled past four).
// Start points are kept pairwise distant so that samples whose temporal crop
// delays the motion still expose class information in their early frames.
fn template_point(class: usize, s: f64) -> (f64, f64) {
    match class % 4 {
        // Diagonal line, top-left to bottom-right.
        0 => (0.08 + 0.84 * s, 0.08 + 0.84 * s),
        // Arc from the bottom-left, over the top, to the bottom-right.
        1 => (0.9 - 0.8 * (std::f64::consts::PI * s).sin(), 0.08 + 0.84 * s),
        // Vee from the top-right, dipping to the bottom, back to the top-left.
        2 => (0.1 + 0.8 * (1.0 - (2.0 * s - 1.0).abs()), 0.92 - 0.84 * s),
        // Closed loop around the center, starting at the bottom.
        _ => {
            let a = 2.0 * std::f64::consts::PI * s;
            (0.5 + 0.38 * a.cos(), 0.5 + 0.38 * a.sin())
        }
    }
}

/// Deterministic moving-blob dataset: per sample a uniform integer spatial
/// shift in `[0, spatial_shift_max]^2` and a temporal crop (the motion plays
/// over `len in [temporal_crop_min, T]` frames starting at a random offset,
/// with the endpoint poses held outside).
pub fn generate_moving_blobs(cfg: &GenConfig) -> Result<Dataset> {
    let GenConfig { classes, per_class, t, h, w, spatial_shift_max, temporal_crop_min, seed } = *cfg;
    if temporal_crop_min < 1 || temporal_crop_min > t {
        return Err(ForecastError::BadCrop { crop_min: temporal_crop_min, t });
    }
    let usable = h.min(w).saturating_sub(1).saturating_sub(spatial_shift_max);
    if usable < 3 {
        return Err(ForecastError::InfeasibleShift {
            h,
            w,
            shift: spatial_shift_max,
            needed: 3 + spatial_shift_max + 1 - h.min(w),
        });
    }
    let sigma = (usable as f64 / 12.0).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);

    for class in 0..classes {
        for _ in 0..per_class {
            let shift_r = rng.random_range(0..=spatial_shift_max) as f64;
            let shift_c = rng.random_range(0..=spatial_shift_max) as f64;
            let len = rng.random_range(temporal_crop_min..=t);
            let offset = rng.random_range(0..=t - len);
            let mut frames = Array2::zeros((t, h * w));
            for ft in 0..t {
                let s = if ft < offset {
                    0.0
                } else if ft >= offset + len {
                    1.0
                } else if len == 1 {
                    0.0
                } else {
                    (ft - offset) as f64 / (len - 1) as f64
                };
                let (ur, uc) = template_point(class, s);
                let center_r = ur * usable as f64 + shift_r;
                let center_c = uc * usable as f64 + shift_c;
                for r in 0..h {
                    for c in 0..w {
                        let dr = r as f64 - center_r;
                        let dc = c as f64 - center_c;
                        frames[[ft, r * w + c]] = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            samples.push(MeasureSeries::new(frames)?);
            labels.push(class);
        }
    }
    Ok(Dataset { samples, labels, grid: (h, w), provenance: *cfg })
}

/// Loss used for both neighbor retrieval and the forecast barycenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Soft-DTW over debiased transport frame costs.
    Sta,
    /// Mean per-frame debiased transport cost, no alignment.
    FrameUot,
    /// Mean per-frame Euclidean distance.
    FrameL2,
    /// Euclidean distance of the flattened prefix tensor.
    FlatL2,
}

/// How the Soft-DTW temperature is chosen for STA losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSpec {
    Fixed(f64),
    /// Saturation-shift heuristic with `r = max` observed frame cost and the
    /// full series length (at least 6, where the bound is established).
    FromKmax { k_max: usize, eta: f64 },
}

impl BetaSpec {
    pub fn resolve(&self, r: f64, t: usize) -> Result<f64> {
        match *self {
            BetaSpec::Fixed(beta) => Ok(beta),
            BetaSpec::FromKmax { k_max, eta } => Ok(beta_heuristic(k_max, eta, r, t.max(6))?),
        }
    }
}

/// Transport and alignment parameters of the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineParams {
    pub uot: UotParams,
    pub beta: BetaSpec,
    /// Outer iterations of the constrained STA barycenter.
    pub max_outer: usize,
}

impl PipelineParams {
    pub fn new(uot: UotParams, beta: BetaSpec) -> Self {
        Self { uot, beta, max_outer: 4 }
    }
}

pub struct ForecastTask {
    pub t0: usize,
    pub k: usize,
    pub loss: Loss,
}

fn check_task(task: &ForecastTask, dataset: &Dataset) -> Result<()> {
    let t = dataset.provenance.t;
    if task.t0 < 1 || task.t0 >= t {
        return Err(ForecastError::BadPrefix { t0: task.t0, t });
    }
    Ok(())
}

fn flat_l2(a: &MeasureSeries, b: &MeasureSeries, t0: usize) -> f64 {
    let mut sq = 0.0;
    for t in 0..t0 {
        for (x, y) in a.frame(t).iter().zip(b.frame(t)) {
            sq += (x - y) * (x - y);
        }
    }
    sq.sqrt()
}

fn frame_l2(a: &MeasureSeries, b: &MeasureSeries, t0: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..t0 {
        let mut sq = 0.0;
        for (x, y) in a.frame(t).iter().zip(b.frame(t)) {
            sq += (x - y) * (x - y);
        }
        total += sq.sqrt();
    }
    total / t0 as f64
}

/// Pairwise transport inner products `<a, Kb>` needed by the debiased cost;
/// self terms are passed in so they are solved once per frame.
fn sta_cost_matrix(
    x: &MeasureSeries,
    y: &MeasureSeries,
    x_self: &[f64],
    y_self: &[f64],
    geom: &GroundGeometry,
    params: &UotParams,
) -> Result<Array2<f64>> {
    let (t1, t2) = (x.len_t(), y.len_t());
    let scale = params.epsilon + 2.0 * params.gamma;
    let entries: std::result::Result<Vec<f64>, UotError> = (0..t1 * t2)
        .into_par_iter()
        .map(|idx| {
            let (s, t) = (idx / t2, idx % t2);
            let xm = x.frame_measure(s).map_err(|_| UotError::ZeroFrame { frame: s })?;
            let ym = y.frame_measure(t).map_err(|_| UotError::ZeroFrame { frame: t })?;
            let (duals, _) = crate::uot::sinkhorn_uot(&xm, &ym, geom, params)?;
            let log_kb = geom.kernel_log_apply(&duals.log_b);
            let terms: Vec<f64> =
                duals.log_a.iter().zip(&log_kb).map(|(&a, &kb)| a + kb).collect();
            let akb = crate::math::logsumexp(&terms).exp();
            Ok(-scale * (akb - 0.5 * (x_self[s] + y_self[t])))
        })
        .collect();
    let entries = entries?;
    Ok(Array2::from_shape_vec((t1, t2), entries).expect("shape"))
}

fn self_terms(series: &MeasureSeries, geom: &GroundGeometry, params: &UotParams) -> Result<Vec<f64>> {
    (0..series.len_t())
        .into_par_iter()
        .map(|t| {
            let m = series.frame_measure(t).map_err(|_| UotError::ZeroFrame { frame: t })?;
            let (sym, _) = symmetric_sinkhorn(&m, geom, params)?;
            Ok(sym.self_inner)
        })
        .collect()
}

/// Distances from a query prefix to every candidate prefix under `loss`.
/// For STA, `beta` is resolved once from the largest frame cost observed
/// across all candidate cost matrices, so values stay comparable; the
/// resolved value is returned.
pub fn prefix_distances(
    query: &MeasureSeries,
    candidates: &[&MeasureSeries],
    t0: usize,
    loss: Loss,
    geom: &GroundGeometry,
    params: &PipelineParams,
) -> Result<(Vec<f64>, Option<f64>)> {
    let q = query.slice_time(0, t0)?;
    match loss {
        Loss::FlatL2 => Ok((candidates.iter().map(|c| flat_l2(query, c, t0)).collect(), None)),
        Loss::FrameL2 => Ok((candidates.iter().map(|c| frame_l2(query, c, t0)).collect(), None)),
        Loss::FrameUot => {
            // Query self terms are shared by every candidate.
            let q_self = self_terms(&q, geom, &params.uot)?;
            let scale = params.uot.epsilon + 2.0 * params.uot.gamma;
            let dists: Result<Vec<f64>> = candidates
                .par_iter()
                .map(|c| {
                    let mut total = 0.0;
                    for t in 0..t0 {
                        let qm =
                            q.frame_measure(t).map_err(|_| UotError::ZeroFrame { frame: t })?;
                        let cm =
                            c.frame_measure(t).map_err(|_| UotError::ZeroFrame { frame: t })?;
                        let (duals, _) = crate::uot::sinkhorn_uot(&qm, &cm, geom, &params.uot)?;
                        let log_kb = geom.kernel_log_apply(&duals.log_b);
                        let terms: Vec<f64> =
                            duals.log_a.iter().zip(&log_kb).map(|(&a, &kb)| a + kb).collect();
                        let akb = crate::math::logsumexp(&terms).exp();
                        let (sym_c, _) = symmetric_sinkhorn(&cm, geom, &params.uot)?;
                        total += -scale * (akb - 0.5 * (q_self[t] + sym_c.self_inner));
                    }
                    Ok(total / t0 as f64)
                })
                .collect();
            Ok((dists?, None))
        }
        Loss::Sta => {
            let q_self = self_terms(&q, geom, &params.uot)?;
            let mut costs = Vec::with_capacity(candidates.len());
            for c in candidates {
                let cp = c.slice_time(0, t0)?;
                let c_self = self_terms(&cp, geom, &params.uot)?;
                costs.push(sta_cost_matrix(&q, &cp, &q_self, &c_self, geom, &params.uot)?);
            }
            let r = costs
                .iter()
                .flat_map(|m| m.iter().copied())
                .fold(0.0f64, f64::max)
                .max(f64::MIN_POSITIVE);
            let beta = params.beta.resolve(r, query.len_t())?;
            let mut dists = Vec::with_capacity(candidates.len());
            for cost in costs {
                let matrix = crate::align::CostMatrix::new(cost).map_err(BarycenterError::from)?;
                let (v, _) =
                    crate::align::sdtw_forward(&matrix, beta).map_err(BarycenterError::from)?;
                dists.push(v);
            }
            Ok((dists, Some(beta)))
        }
    }
}

/// Indices of the `k` nearest dataset samples to `query` on the first `t0`
/// frames; ties break toward the lower index. The query itself is not
/// excluded — drop its index from the result when querying in-sample.
pub fn knn(
    query: &MeasureSeries,
    dataset: &Dataset,
    task: &ForecastTask,
    geom: &GroundGeometry,
    params: &PipelineParams,
) -> Result<Vec<usize>> {
    check_task(task, dataset)?;
    if task.k > dataset.len() {
        return Err(ForecastError::NotEnoughCandidates { k: task.k, available: dataset.len() });
    }
    let candidates: Vec<&MeasureSeries> = dataset.samples.iter().collect();
    let (dists, _) = prefix_distances(query, &candidates, task.t0, task.loss, geom, params)?;
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
    order.truncate(task.k);
    Ok(order)
}

#[derive(Debug, Clone)]
pub struct Forecast {
    pub prediction: MeasureSeries,
    pub neighbors: Vec<usize>,
    /// Resolved Soft-DTW temperature when an STA loss was used.
    pub beta: Option<f64>,
}

/// Forecast the frames past `t0`: select neighbors (excluding
/// `exclude_index`, typically the query itself), run the loss's barycenter
/// over them with uniform weights, and clamp the observed prefix after every
/// update.
pub fn forecast(
    query: &MeasureSeries,
    dataset: &Dataset,
    task: &ForecastTask,
    geom: &GroundGeometry,
    params: &PipelineParams,
    exclude_index: Option<usize>,
) -> Result<Forecast> {
    check_task(task, dataset)?;
    let candidate_idx: Vec<usize> =
        (0..dataset.len()).filter(|&i| Some(i) != exclude_index).collect();
    if task.k > candidate_idx.len() {
        return Err(ForecastError::NotEnoughCandidates { k: task.k, available: candidate_idx.len() });
    }
    let candidates: Vec<&MeasureSeries> = candidate_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let (dists, beta) = prefix_distances(query, &candidates, task.t0, task.loss, geom, params)?;
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(candidate_idx[a].cmp(&candidate_idx[b])));
    order.truncate(task.k);
    let neighbors: Vec<usize> = order.iter().map(|&i| candidate_idx[i]).collect();
    let neighbor_series: Vec<MeasureSeries> =
        neighbors.iter().map(|&i| dataset.samples[i].clone()).collect();

    let t = dataset.provenance.t;
    let p = query.dim_p();
    let clamp = |frames: &mut Array2<f64>| {
        for tt in 0..task.t0 {
            frames.row_mut(tt).assign(&query.frame(tt));
        }
    };

    let prediction = match task.loss {
        Loss::FlatL2 | Loss::FrameL2 => {
            let mut frames = Array2::zeros((t, p));
            for s in &neighbor_series {
                frames += s.frames();
            }
            frames /= task.k as f64;
            clamp(&mut frames);
            MeasureSeries::new(frames)?
        }
        Loss::FrameUot => {
            let mut frames = Array2::zeros((t, p));
            let weights = vec![1.0; task.k];
            for tt in 0..t {
                if tt < task.t0 {
                    frames.row_mut(tt).assign(&query.frame(tt));
                    continue;
                }
                let frame_inputs: Result<Vec<Measure>> = neighbor_series
                    .iter()
                    .map(|s| {
                        s.frame_measure(tt).map_err(|_| UotError::ZeroFrame { frame: tt }.into())
                    })
                    .collect();
                let (bary, _) =
                    debiased_uot_barycenter(&frame_inputs?, &weights, geom, &params.uot)?;
                frames.row_mut(tt).assign(&bary.weights());
            }
            MeasureSeries::new(frames)?
        }
        Loss::Sta => {
            let uniform = vec![1.0; task.k];
            let beta_value = beta.expect("sta distances resolve beta");
            let mut cfg = StaBaryConfig::new(params.uot, beta_value, t);
            cfg.max_outer = params.max_outer;
            let mut x0_frames = Array2::zeros((t, p));
            for s in &neighbor_series {
                x0_frames += s.frames();
            }
            x0_frames /= task.k as f64;
            clamp(&mut x0_frames);
            let x0 = MeasureSeries::new(x0_frames)?;
            let (bary, _diag) =
                sta_barycenter_with(&neighbor_series, &uniform, geom, &cfg, Some(&x0), clamp)?;
            bary
        }
    };

    Ok(Forecast { prediction, neighbors, beta })
}

/// Scoring parameters for the transport proxy: frames are normalized to the
/// simplex and compared with the debiased divergence at a small entropic
/// scale (a stand-in for the exact earth-mover distance).
#[derive(Debug, Clone, Copy)]
pub struct ScoreParams {
    /// `epsilon = epsilon_factor / p`.
    pub epsilon_factor: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self { epsilon_factor: 5.0, gamma: 0.5, tol: 1e-6, max_iter: 20000 }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    /// Mean per-frame Euclidean distance.
    pub l2: f64,
    /// Mean per-frame debiased divergence between simplex-normalized frames.
    pub ot: f64,
    /// Frames skipped by the transport score because one side carried no mass.
    pub skipped: Vec<usize>,
}

/// Score a prediction against the truth, frame by frame.
pub fn score(
    prediction: &MeasureSeries,
    truth: &MeasureSeries,
    geom: &GroundGeometry,
    params: &ScoreParams,
) -> Result<ScoreReport> {
    if prediction.len_t() != truth.len_t() || prediction.dim_p() != truth.dim_p() {
        return Err(ForecastError::ScoreShape);
    }
    let p = prediction.dim_p();
    let score_geom = geom.with_epsilon(params.epsilon_factor / p as f64)?;
    let uot = UotParams::new(score_geom.epsilon(), params.gamma)?
        .with_tol(params.tol)?
        .with_max_iter(params.max_iter)?;

    let t_len = prediction.len_t();
    let mut l2_total = 0.0;
    let mut skipped = Vec::new();
    let mut frame_jobs = Vec::new();
    for t in 0..t_len {
        let (a, b) = (prediction.frame(t), truth.frame(t));
        let mut sq = 0.0;
        for (x, y) in a.iter().zip(b) {
            sq += (x - y) * (x - y);
        }
        l2_total += sq.sqrt();
        let (ma, mb) = (a.sum(), b.sum());
        if ma <= 0.0 || mb <= 0.0 {
            skipped.push(t);
            continue;
        }
        frame_jobs.push((
            Measure::new(a.mapv(|v| v / ma))?,
            Measure::new(b.mapv(|v| v / mb))?,
        ));
    }
    let ot_values: Result<Vec<f64>> = frame_jobs
        .par_iter()
        .map(|(a, b)| Ok(debiased_uot(a, b, &score_geom, &uot)?))
        .collect();
    let ot_values = ot_values?;
    let ot = if ot_values.is_empty() {
        0.0
    } else {
        ot_values.iter().sum::<f64>() / ot_values.len() as f64
    };
    Ok(ScoreReport { l2: l2_total / t_len as f64, ot, skipped })
}

/// Mean fraction of same-class samples among the `k` nearest neighbors of
/// each query (the query itself is excluded from its candidate pool).
pub fn same_class_fraction(
    dataset: &Dataset,
    queries: &[usize],
    task: &ForecastTask,
    geom: &GroundGeometry,
    params: &PipelineParams,
) -> Result<f64> {
    let mut total = 0.0;
    for &qi in queries {
        let candidate_idx: Vec<usize> = (0..dataset.len()).filter(|&i| i != qi).collect();
        let candidates: Vec<&MeasureSeries> =
            candidate_idx.iter().map(|&i| &dataset.samples[i]).collect();
        let (dists, _) =
            prefix_distances(&dataset.samples[qi], &candidates, task.t0, task.loss, geom, params)?;
        let mut order: Vec<usize> = (0..dists.len()).collect();
        order.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
        let same = order
            .iter()
            .take(task.k)
            .filter(|&&i| dataset.labels[candidate_idx[i]] == dataset.labels[qi])
            .count();
        total += same as f64 / task.k as f64;
    }
    Ok(total / queries.len() as f64)
}
