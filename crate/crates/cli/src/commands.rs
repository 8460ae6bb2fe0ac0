//! Subcommand implementations. Each takes the resolved [`RunConfig`] plus its
//! own arguments and writes STSD tensors or CSV tables (header row included;
//! plotting is external).

use crate::config::RunConfig;
use crate::stsd::{self, Provenance, StsdFile, StsdMeta};
use crate::{CliError, Result};
use ndarray::Array2;
use sta_core::align::{sdtw_forward, CostMatrix};
use sta_core::barycenter::{
    debiased_uot_barycenter, sta_barycenter, uot_barycenter_biased, StaBaryConfig,
};
use sta_core::delannoy::{beta_heuristic, dirac_lower_bound};
use sta_core::forecast::{
    forecast, generate_moving_blobs, score, BetaSpec, Dataset, ForecastTask, GenConfig, Loss,
    PipelineParams, ScoreParams,
};
use sta_core::geometry::GroundGeometry;
use sta_core::measure::MeasureSeries;
use sta_core::uot::PairwiseUot;
use std::io::Write;
use std::path::{Path, PathBuf};

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::Io { path: "<stdout>".into(), source: e })
        }
    }
}

fn dataset_to_stsd(d: &Dataset) -> StsdFile {
    let (n, t, p) = (d.len(), d.provenance.t, d.grid.0 * d.grid.1);
    let mut data = Vec::with_capacity(n * t * p);
    for s in &d.samples {
        data.extend(s.frames().iter().copied());
    }
    StsdFile {
        n: n as u32,
        t: t as u32,
        p: p as u32,
        data,
        meta: Some(StsdMeta {
            labels: Some(d.labels.iter().map(|&l| l as u32).collect()),
            grid: Some([d.grid.0 as u32, d.grid.1 as u32]),
            provenance: Some(Provenance {
                classes: d.provenance.classes as u32,
                per_class: d.provenance.per_class as u32,
                t: d.provenance.t as u32,
                h: d.provenance.h as u32,
                w: d.provenance.w as u32,
                spatial_shift_max: d.provenance.spatial_shift_max as u32,
                temporal_crop_min: d.provenance.temporal_crop_min as u32,
                seed: d.provenance.seed,
            }),
        }),
    }
}

pub struct LoadedDataset {
    pub samples: Vec<MeasureSeries>,
    pub labels: Vec<usize>,
    pub grid: (usize, usize),
    pub t: usize,
    pub p: usize,
}

pub fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<LoadedDataset> {
    let file = stsd::read(path)?;
    let (n, t, p) = (file.n as usize, file.t as usize, file.p as usize);
    let grid = match (file.meta.as_ref().and_then(|m| m.grid), cfg.grid) {
        (Some([h, w]), _) => (h as usize, w as usize),
        (None, Some(hw)) => hw,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "{}: no grid metadata; pass --grid HxW",
                path.display()
            )))
        }
    };
    if grid.0 * grid.1 != p {
        return Err(CliError::Usage(format!(
            "grid {}x{} does not match support size {p}",
            grid.0, grid.1
        )));
    }
    let labels = file
        .meta
        .as_ref()
        .and_then(|m| m.labels.clone())
        .map(|ls| ls.into_iter().map(|l| l as usize).collect())
        .unwrap_or_else(|| vec![0; n]);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * t * p;
        let frames =
            Array2::from_shape_vec((t, p), file.data[start..start + t * p].to_vec())
                .expect("shape from header");
        samples.push(MeasureSeries::new(frames)?);
    }
    Ok(LoadedDataset { samples, labels, grid, t, p })
}

fn geometry_for(loaded: &LoadedDataset, cfg: &RunConfig) -> Result<GroundGeometry> {
    match &cfg.cost_file {
        Some(path) => {
            let cost = read_cost_csv(path, loaded.p)?;
            Ok(GroundGeometry::from_cost(cost, cfg.epsilon_for(loaded.p))?)
        }
        None => {
            Ok(GroundGeometry::grid(loaded.grid.0, loaded.grid.1, true, cfg.epsilon_for(loaded.p))?)
        }
    }
}

/// A p x p cost matrix as CSV, one row per line, no header.
fn read_cost_csv(path: &Path, p: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cost = Array2::zeros((p, p));
    let mut rows = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        if i >= p {
            return Err(CliError::Usage(format!("{}: more than {p} rows", path.display())));
        }
        for (j, field) in line.split(',').enumerate() {
            if j >= p {
                return Err(CliError::Usage(format!(
                    "{}: row {i} has more than {p} columns",
                    path.display()
                )));
            }
            cost[[i, j]] = field.trim().parse::<f64>().map_err(|e| {
                CliError::Usage(format!("{}: row {i} column {j}: {e}", path.display()))
            })?;
        }
        rows = i + 1;
    }
    if rows != p {
        return Err(CliError::Usage(format!("{}: found {rows} rows, expected {p}", path.display())));
    }
    Ok(cost)
}

fn as_core_dataset(loaded: &LoadedDataset, cfg: &RunConfig) -> Dataset {
    Dataset {
        samples: loaded.samples.clone(),
        labels: loaded.labels.clone(),
        grid: loaded.grid,
        provenance: GenConfig {
            classes: loaded.labels.iter().max().map_or(1, |m| m + 1),
            per_class: 0,
            t: loaded.t,
            h: loaded.grid.0,
            w: loaded.grid.1,
            spatial_shift_max: 0,
            temporal_crop_min: 1,
            seed: cfg.seed,
        },
    }
}

// ---------------------------------------------------------------------------
// gen

pub struct GenArgs {
    pub classes: usize,
    pub per_class: usize,
    pub t: usize,
    pub spatial_shift_max: usize,
    pub temporal_crop_min: usize,
    pub output: PathBuf,
}

pub fn cmd_gen(cfg: &RunConfig, args: &GenArgs) -> Result<()> {
    let (h, w) = cfg.grid.unwrap_or((30, 30));
    let gen = GenConfig {
        classes: args.classes,
        per_class: args.per_class,
        t: args.t,
        h,
        w,
        spatial_shift_max: args.spatial_shift_max,
        temporal_crop_min: args.temporal_crop_min,
        seed: cfg.seed,
    };
    let dataset = generate_moving_blobs(&gen)?;
    stsd::write(&args.output, &dataset_to_stsd(&dataset))?;
    println!(
        "wrote {} (N={}, T={}, p={})",
        args.output.display(),
        dataset.len(),
        gen.t,
        h * w
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dist

pub struct DistArgs {
    pub input: PathBuf,
    pub i: usize,
    pub j: usize,
    pub output: Option<PathBuf>,
}

pub fn cmd_dist(cfg: &RunConfig, args: &DistArgs) -> Result<()> {
    let loaded = load_dataset(&args.input, cfg)?;
    let n = loaded.samples.len();
    if args.i >= n || args.j >= n {
        return Err(CliError::Usage(format!(
            "sample indices ({}, {}) out of range for N = {n}",
            args.i, args.j
        )));
    }
    let geom = geometry_for(&loaded, cfg)?;
    let params = cfg.uot_params(loaded.p)?;
    let (x, y) = (&loaded.samples[args.i], &loaded.samples[args.j]);

    let mut pairwise = PairwiseUot::new(&geom, params);
    let cost = pairwise.cost_matrix(x, y)?;
    if !pairwise.last_call_converged {
        return Err(CliError::Numerical(format!(
            "pairwise transport solves did not reach tol {} within {} iterations",
            params.tol, params.max_iter
        )));
    }
    let r = cost.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let beta = cfg.beta.resolve(r, loaded.t)?;
    let (sta, _) = sdtw_forward(&CostMatrix::new(cost.clone())?, beta)?;
    let uot_frame = (0..loaded.t.min(cost.nrows()).min(cost.ncols()))
        .map(|t| cost[[t, t]])
        .sum::<f64>()
        / loaded.t as f64;

    let mut l2_frame = 0.0;
    let mut flat_sq = 0.0;
    for t in 0..loaded.t {
        let mut sq = 0.0;
        for (a, b) in x.frame(t).iter().zip(y.frame(t)) {
            sq += (a - b) * (a - b);
        }
        l2_frame += sq.sqrt();
        flat_sq += sq;
    }
    l2_frame /= loaded.t as f64;

    let mut out = String::from("i,j,sta,uot_frame,l2_frame,l2_flat,beta\n");
    out.push_str(&format!(
        "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
        args.i,
        args.j,
        sta,
        uot_frame,
        l2_frame,
        flat_sq.sqrt(),
        beta
    ));
    write_text(args.output.as_deref(), &out)
}

// ---------------------------------------------------------------------------
// bary

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaryMethod {
    Euclidean,
    Uot,
    UotDebiased,
    Sta,
}

pub struct BaryArgs {
    pub input: PathBuf,
    pub indices: Vec<usize>,
    pub method: BaryMethod,
    pub t_out: Option<usize>,
    pub output: PathBuf,
    pub profile: Option<PathBuf>,
}

pub fn cmd_bary(cfg: &RunConfig, args: &BaryArgs) -> Result<()> {
    let loaded = load_dataset(&args.input, cfg)?;
    let n = loaded.samples.len();
    let indices = if args.indices.is_empty() {
        (0..n).collect::<Vec<_>>()
    } else {
        args.indices.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(CliError::Usage(format!("index {bad} out of range for N = {n}")));
    }
    let inputs: Vec<MeasureSeries> = indices.iter().map(|&i| loaded.samples[i].clone()).collect();
    let weights = vec![1.0; inputs.len()];
    let t_out = args.t_out.unwrap_or(loaded.t);
    let geom = geometry_for(&loaded, cfg)?;
    let params = cfg.uot_params(loaded.p)?;

    let bary = match args.method {
        BaryMethod::Euclidean => {
            let mut frames = Array2::zeros((loaded.t, loaded.p));
            for s in &inputs {
                frames += s.frames();
            }
            frames /= inputs.len() as f64;
            MeasureSeries::new(frames)?
        }
        BaryMethod::Uot | BaryMethod::UotDebiased => {
            // Frame-wise barycenters, independently across time.
            let mut frames = Array2::zeros((loaded.t, loaded.p));
            for t in 0..loaded.t {
                let frame_inputs: std::result::Result<Vec<_>, _> =
                    inputs.iter().map(|s| s.frame_measure(t)).collect();
                let frame_inputs = frame_inputs?;
                let (m, diag) = if args.method == BaryMethod::UotDebiased {
                    debiased_uot_barycenter(&frame_inputs, &weights, &geom, &params)?
                } else {
                    uot_barycenter_biased(&frame_inputs, &weights, &geom, &params)?
                };
                if !diag.converged {
                    return Err(CliError::Numerical(format!(
                        "frame {t}: barycenter change {:.3e} above tol {:.1e} after {} iterations",
                        diag.last_change, params.tol, diag.iterations
                    )));
                }
                frames.row_mut(t).assign(&m.weights());
            }
            MeasureSeries::new(frames)?
        }
        BaryMethod::Sta => {
            // Resolve beta against the initial pairwise costs.
            let beta = match cfg.beta {
                BetaSpec::Fixed(b) => b,
                BetaSpec::FromKmax { k_max, eta } => {
                    let mut r = f64::MIN_POSITIVE;
                    let probe = &inputs[0];
                    let mut pairwise = PairwiseUot::new(&geom, params);
                    for other in &inputs {
                        let cost = pairwise.cost_matrix(other, probe)?;
                        r = r.max(cost.iter().copied().fold(0.0f64, f64::max));
                    }
                    let b = beta_heuristic(k_max, eta, r, loaded.t.max(6))?;
                    eprintln!("resolved beta = {b:.6e} (r = {r:.6e}, k_max = {k_max})");
                    b
                }
            };
            let mut sta_cfg = StaBaryConfig::new(params, beta, t_out);
            sta_cfg.max_outer = cfg.outer_max;
            let (bary, diag) = sta_barycenter(&inputs, &weights, &geom, &sta_cfg)?;
            for warning in &diag.warnings {
                eprintln!("warning: {warning}");
            }
            bary
        }
    };

    stsd::write(
        &args.output,
        &StsdFile {
            n: 1,
            t: bary.len_t() as u32,
            p: loaded.p as u32,
            data: bary.frames().iter().copied().collect(),
            meta: Some(StsdMeta {
                labels: None,
                grid: Some([loaded.grid.0 as u32, loaded.grid.1 as u32]),
                provenance: None,
            }),
        },
    )?;

    if let Some(profile) = &args.profile {
        let mut out = String::from("t,l2_norm\n");
        for t in 0..bary.len_t() {
            let norm = bary.frame(t).dot(&bary.frame(t)).sqrt();
            out.push_str(&format!("{t},{norm:.12e}\n"));
        }
        write_text(Some(profile), &out)?;
    }
    println!("wrote {}", args.output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bound

pub struct BoundArgs {
    pub t: usize,
    pub t_star: usize,
    pub betas: Vec<f64>,
    pub kmax_list: Vec<usize>,
    pub eta: f64,
    pub shifts: usize,
    pub amplitude: f64,
    pub output: Option<PathBuf>,
}

/// Dirac shift-gap curves against the analytic lower bound: for each beta and
/// each shift k, the measured `sdtw(x, y_k) - sdtw(x, x)` with squared
/// distance costs, the bound `LB_beta(k)`, and a saturation flag marking gaps
/// within `eta * beta` of the curve's maximum. The `k = 0` row reports the
/// trivial zero bound (the analytic one is established for `k >= 1`).
pub fn cmd_bound(args: &BoundArgs) -> Result<()> {
    if args.t_star < 1 || args.t_star > args.t {
        return Err(CliError::Usage(format!(
            "t_star = {} must lie in [1, T] = [1, {}]",
            args.t_star, args.t
        )));
    }
    let max_shift = args.t - args.t_star;
    if args.shifts > max_shift {
        return Err(CliError::Usage(format!(
            "shifts = {} exceeds T - t_star = {max_shift}",
            args.shifts
        )));
    }
    let r = args.amplitude * args.amplitude;
    let mut beta_rows: Vec<(Option<usize>, f64)> =
        args.betas.iter().map(|&b| (None, b)).collect();
    for &k_max in &args.kmax_list {
        beta_rows.push((Some(k_max), beta_heuristic(k_max, args.eta, r, args.t)?));
    }
    if beta_rows.is_empty() {
        return Err(CliError::Usage("pass --betas or --kmax-list".into()));
    }

    let mut x = vec![0.0; args.t];
    x[args.t_star - 1] = args.amplitude;
    let mut out = String::from("kmax,beta,k,gap,lb,saturated\n");
    for (k_max, beta) in beta_rows {
        let cost_xx = CostMatrix::from_univariate_sq(&x, &x)?;
        let (self_value, _) = sdtw_forward(&cost_xx, beta)?;
        let mut rows = Vec::with_capacity(args.shifts + 1);
        for k in 0..=args.shifts {
            let gap = if k == 0 {
                0.0
            } else {
                let mut y = vec![0.0; args.t];
                y[args.t_star - 1 + k] = args.amplitude;
                let (v, _) = sdtw_forward(&CostMatrix::from_univariate_sq(&x, &y)?, beta)?;
                v - self_value
            };
            let lb = if k == 0 { 0.0 } else { dirac_lower_bound(k, beta, r, args.t)? };
            rows.push((k, gap, lb));
        }
        let max_gap = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        for (k, gap, lb) in rows {
            let saturated = gap >= max_gap - args.eta * beta;
            out.push_str(&format!(
                "{},{beta:.12e},{k},{gap:.12e},{lb:.12e},{}\n",
                k_max.map_or(String::new(), |k| k.to_string()),
                u8::from(saturated)
            ));
        }
    }
    write_text(args.output.as_deref(), &out)
}

// ---------------------------------------------------------------------------
// forecast

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LossArg {
    Sta,
    Uot,
    L2,
    FlatL2,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Sta => Loss::Sta,
            LossArg::Uot => Loss::FrameUot,
            LossArg::L2 => Loss::FrameL2,
            LossArg::FlatL2 => Loss::FlatL2,
        }
    }
}

pub struct ForecastArgs {
    pub input: PathBuf,
    pub t0: usize,
    pub k: usize,
    pub loss: LossArg,
    pub queries: Vec<usize>,
    pub output_pred: PathBuf,
    pub output_scores: Option<PathBuf>,
}

pub fn cmd_forecast(cfg: &RunConfig, args: &ForecastArgs) -> Result<()> {
    let loaded = load_dataset(&args.input, cfg)?;
    let geom = geometry_for(&loaded, cfg)?;
    let params = PipelineParams {
        uot: cfg.uot_params(loaded.p)?,
        beta: cfg.beta,
        max_outer: cfg.outer_max.min(8),
    };
    let dataset = as_core_dataset(&loaded, cfg);
    let queries = if args.queries.is_empty() {
        (0..dataset.len()).collect::<Vec<_>>()
    } else {
        args.queries.clone()
    };
    if let Some(&bad) = queries.iter().find(|&&q| q >= dataset.len()) {
        return Err(CliError::Usage(format!(
            "query {bad} out of range for N = {}",
            dataset.len()
        )));
    }
    let task = ForecastTask { t0: args.t0, k: args.k, loss: args.loss.into() };
    let score_params = ScoreParams::default();

    let mut pred_data = Vec::with_capacity(queries.len() * loaded.t * loaded.p);
    let mut scores = String::from("query,label,l2,ot\n");
    let mut by_class: std::collections::BTreeMap<usize, (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    for &q in &queries {
        let f = forecast(&dataset.samples[q], &dataset, &task, &geom, &params, Some(q))?;
        let suffix_pred = f.prediction.slice_time(args.t0, loaded.t)?;
        let suffix_truth = dataset.samples[q].slice_time(args.t0, loaded.t)?;
        let report = score(&suffix_pred, &suffix_truth, &geom, &score_params)?;
        for t in &report.skipped {
            eprintln!("warning: query {q}: frame {} skipped by the transport score", t + args.t0);
        }
        scores.push_str(&format!(
            "{q},{},{:.12e},{:.12e}\n",
            dataset.labels[q], report.l2, report.ot
        ));
        let slot = by_class.entry(dataset.labels[q]).or_insert((0.0, 0.0, 0));
        slot.0 += report.l2;
        slot.1 += report.ot;
        slot.2 += 1;
        pred_data.extend(f.prediction.frames().iter().copied());
    }
    for (class, (l2, ot, count)) in &by_class {
        println!(
            "class {class}: mean l2 {:.6e}, mean ot {:.6e} over {count} queries",
            l2 / *count as f64,
            ot / *count as f64
        );
    }

    stsd::write(
        &args.output_pred,
        &StsdFile {
            n: queries.len() as u32,
            t: loaded.t as u32,
            p: loaded.p as u32,
            data: pred_data,
            meta: Some(StsdMeta {
                labels: Some(queries.iter().map(|&q| dataset.labels[q] as u32).collect()),
                grid: Some([loaded.grid.0 as u32, loaded.grid.1 as u32]),
                provenance: None,
            }),
        },
    )?;
    write_text(args.output_scores.as_deref(), &scores)?;
    println!("wrote {}", args.output_pred.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

pub struct BenchArgs {
    pub output: Option<PathBuf>,
}

pub fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    use std::time::Instant;
    let mut out = String::from("name,detail,seconds\n");
    let mut record = |name: &str, detail: String, start: Instant| {
        out.push_str(&format!("{name},{detail},{:.6}\n", start.elapsed().as_secs_f64()));
    };

    let t0 = Instant::now();
    let table = sta_core::delannoy::DelannoyTable::new(1024);
    let _ = table.log(1024, 1024);
    record("delannoy_table", "n=1024".into(), t0);

    let t0 = Instant::now();
    let delta = CostMatrix::new(Array2::from_shape_fn((64, 64), |(i, j)| {
        ((i as f64 - j as f64) * 0.11).sin().abs()
    }))?;
    let (_, table) = sdtw_forward(&delta, 0.5)?;
    let _ = sta_core::align::sdtw_backward(&delta, &table, 0.5)?;
    record("sdtw_forward_backward", "t=64".into(), t0);

    for &(h, w) in &[(16usize, 16usize), (30, 30)] {
        let p = h * w;
        let geom = GroundGeometry::grid(h, w, true, cfg.epsilon_for(p))?;
        let params = cfg.uot_params(p)?;
        let gen = GenConfig {
            classes: 1,
            per_class: 2,
            t: 2,
            h,
            w,
            spatial_shift_max: 2,
            temporal_crop_min: 2,
            seed: cfg.seed,
        };
        let data = generate_moving_blobs(&gen)?;
        let x = data.samples[0].frame_measure(0)?;
        let y = data.samples[1].frame_measure(1)?;
        let t0 = Instant::now();
        let _ = sta_core::uot::debiased_uot(&x, &y, &geom, &params)?;
        record("debiased_uot", format!("p={p}"), t0);

        let t0 = Instant::now();
        let frames: Vec<_> = (0..2).map(|i| data.samples[i].frame_measure(0).unwrap()).collect();
        let _ = debiased_uot_barycenter(&frames, &[1.0, 1.0], &geom, &params)?;
        record("debiased_barycenter", format!("p={p} k=2"), t0);
    }

    write_text(args.output.as_deref(), &out)
}
