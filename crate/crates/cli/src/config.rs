//! Run configuration with the precedence CLI flags > JSON config file >
//! defaults. `beta` and the `(k_max, eta)` heuristic are mutually exclusive
//! ways to pick the Soft-DTW temperature.

use crate::{CliError, Result};
use serde::Deserialize;
use sta_core::forecast::BetaSpec;
use sta_core::geometry::default_epsilon;
use sta_core::uot::UotParams;
use std::path::Path;

/// Flags shared by the solver-facing subcommands. All optional; `resolve`
/// applies the file config and the defaults.
#[derive(clap::Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config file (lowest-precedence source of the options below).
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Entropic scale; defaults to 1/p for a p-point support.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Marginal relaxation strength.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Soft-DTW temperature (mutually exclusive with --kmax).
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Pick beta so the shift bound saturates near this shift.
    #[arg(long, global = true)]
    pub kmax: Option<usize>,
    /// Saturation slack of the beta heuristic.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Sinkhorn convergence tolerance (sup-norm, log domain).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Sinkhorn iteration cap.
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Outer iteration cap of alternating barycenters.
    #[arg(long, global = true)]
    pub outer_max: Option<usize>,
    /// Generator seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Grid dimensions HxW when the input has no grid metadata.
    #[arg(long, global = true, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// Explicit p x p ground cost matrix as CSV (graph costs, meshes);
    /// replaces the grid geometry and disables the separable fast path.
    #[arg(long, global = true)]
    pub cost_file: Option<std::path::PathBuf>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    epsilon: Option<f64>,
    gamma: Option<f64>,
    beta: Option<f64>,
    kmax: Option<usize>,
    eta: Option<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    outer_max: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    grid: Option<String>,
}

pub fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse::<usize>().map_err(|e| format!("bad grid height: {e}"))?;
    let w = w.trim().parse::<usize>().map_err(|e| format!("bad grid width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((h, w))
}

/// Fully resolved run options.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `None` means "1/p once the support size is known".
    pub epsilon: Option<f64>,
    pub gamma: f64,
    pub beta: BetaSpec,
    pub tol: f64,
    pub max_iter: usize,
    pub outer_max: usize,
    pub seed: u64,
    pub threads: usize,
    pub grid: Option<(usize, usize)>,
    pub cost_file: Option<std::path::PathBuf>,
}

impl RunConfig {
    pub fn epsilon_for(&self, p: usize) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(p))
    }

    pub fn uot_params(&self, p: usize) -> Result<UotParams> {
        Ok(UotParams::new(self.epsilon_for(p), self.gamma)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .with_tol(self.tol)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .with_max_iter(self.max_iter)
            .map_err(|e| CliError::Usage(e.to_string()))?)
    }
}

pub fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let file_grid = match &file.grid {
        Some(s) => Some(parse_grid(s).map_err(CliError::Usage)?),
        None => None,
    };

    let beta = args.beta.or(file.beta);
    let kmax = args.kmax.or(file.kmax);
    let eta = args.eta.or(file.eta).unwrap_or(0.01);
    let beta = match (beta, kmax) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--beta and --kmax are mutually exclusive ways to set the Soft-DTW temperature"
                    .into(),
            ))
        }
        (Some(b), None) => BetaSpec::Fixed(b),
        (None, Some(k)) => BetaSpec::FromKmax { k_max: k, eta },
        // Saturation near one quarter of the series usually works; resolved
        // per run against the observed costs.
        (None, None) => BetaSpec::FromKmax { k_max: 10, eta },
    };

    Ok(RunConfig {
        epsilon: args.epsilon.or(file.epsilon),
        gamma: args.gamma.or(file.gamma).unwrap_or(1.0),
        beta,
        tol: args.tol.or(file.tol).unwrap_or(1e-7),
        max_iter: args.max_iter.or(file.max_iter).unwrap_or(5000),
        outer_max: args.outer_max.or(file.outer_max).unwrap_or(50),
        seed: args.seed.or(file.seed).unwrap_or(0),
        threads: args.threads.or(file.threads).unwrap_or(0),
        grid: args.grid.or(file_grid),
        cost_file: args.cost_file.clone(),
    })
}

fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_args() -> CommonArgs {
        CommonArgs::default()
    }

    #[test]
    fn defaults_apply() {
        let cfg = resolve(&empty_args()).unwrap();
        assert_eq!(cfg.gamma, 1.0);
        assert_eq!(cfg.tol, 1e-7);
        assert_eq!(cfg.epsilon, None);
        assert_eq!(cfg.epsilon_for(100), 0.01);
    }

    #[test]
    fn beta_and_kmax_conflict() {
        let args = CommonArgs { beta: Some(0.1), kmax: Some(20), ..empty_args() };
        assert!(matches!(resolve(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"gamma": 2.5, "tol": 1e-3, "grid": "8x9"}"#).unwrap();
        let args = CommonArgs { config: Some(path), gamma: Some(0.7), ..empty_args() };
        let cfg = resolve(&args).unwrap();
        assert_eq!(cfg.gamma, 0.7);
        assert_eq!(cfg.tol, 1e-3);
        assert_eq!(cfg.grid, Some((8, 9)));
    }

    #[test]
    fn unknown_file_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"gama": 2.5}"#).unwrap();
        let args = CommonArgs { config: Some(path), ..empty_args() };
        assert!(matches!(resolve(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn grid_parser() {
        assert_eq!(parse_grid("30x30").unwrap(), (30, 30));
        assert_eq!(parse_grid("4X7").unwrap(), (4, 7));
        assert!(parse_grid("30").is_err());
        assert!(parse_grid("0x5").is_err());
    }
}
