//! Spatio-temporal averaging of measure-valued time series.
//!
//! The library combines two ingredients:
//!
//! - [`align`]: Soft-DTW, a smoothed dynamic time warping loss whose softmin
//!   temperature `beta` trades temporal sensitivity for differentiability, with
//!   exact forward/backward dynamic programs and brute-force oracles.
//! - [`uot`]: entropy-regularized unbalanced optimal transport solved by
//!   generalized Sinkhorn scaling in the log domain, together with its debiased
//!   divergence that vanishes on identical measures.
//!
//! Composing them gives the STA loss (Soft-DTW with the debiased divergence as
//! per-frame cost) and its Fréchet barycenters, implemented in [`barycenter`].
//! [`delannoy`] provides the path-counting machinery behind the `beta`
//! selection heuristic, [`geometry`] the ground costs and Gibbs kernels, and
//! [`forecast`] a synthetic moving-blob dataset plus the k-nearest-neighbor
//! forecasting pipeline.

pub mod align;
pub mod barycenter;
pub mod delannoy;
pub mod forecast;
pub mod geometry;
mod math;
pub mod measure;
pub mod uot;

pub use measure::{Measure, MeasureSeries};
