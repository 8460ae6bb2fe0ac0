//! Discrete non-negative measures on a fixed support, and time series thereof.

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MeasureError {
    /// Weights must be finite and non-negative.
    #[error("weight at index {index} is invalid: {value}")]
    InvalidWeight { index: usize, value: f64 },
    /// A measure must carry some mass.
    #[error("measure has no strictly positive weight")]
    ZeroMeasure,
    /// Series frames must share the support size.
    #[error("frame {frame} has dimension {got}, expected {expected}")]
    FrameDimension { frame: usize, got: usize, expected: usize },
    /// A series needs at least one frame.
    #[error("series has no frames")]
    EmptySeries,
}

pub type Result<T> = std::result::Result<T, MeasureError>;

/// A non-negative weight vector over a fixed `p`-point support. The support
/// itself lives in [`crate::geometry::GroundGeometry`]; total mass is free
/// (unbalanced setting), but at least one weight must be strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Array1<f64>,
}

impl Measure {
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        validate_weights(weights.as_slice().expect("contiguous"), 0)?;
        Ok(Self { weights })
    }

    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(weights))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn mass(&self) -> f64 {
        self.weights.sum()
    }

    /// Element-wise natural log; zero weights map to `-inf`.
    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }
}

/// A length-`T` sequence of non-negative weight vectors sharing one support.
/// Stored row-major as a `T x p` array: row `t` is the frame at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSeries {
    frames: Array2<f64>,
}

impl MeasureSeries {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(MeasureError::EmptySeries);
        }
        for (i, &v) in frames.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(MeasureError::InvalidWeight { index: i, value: v });
            }
        }
        Ok(Self { frames })
    }

    pub fn from_frames(frames: &[Array1<f64>]) -> Result<Self> {
        let t = frames.len();
        if t == 0 {
            return Err(MeasureError::EmptySeries);
        }
        let p = frames[0].len();
        let mut data = Array2::zeros((t, p));
        for (i, f) in frames.iter().enumerate() {
            if f.len() != p {
                return Err(MeasureError::FrameDimension { frame: i, got: f.len(), expected: p });
            }
            data.row_mut(i).assign(f);
        }
        Self::new(data)
    }

    /// Number of time points.
    pub fn len_t(&self) -> usize {
        self.frames.nrows()
    }

    /// Support size shared by every frame.
    pub fn dim_p(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    /// Frame at `t` as a standalone measure; errors if the frame is all-zero.
    pub fn frame_measure(&self, t: usize) -> Result<Measure> {
        Measure::new(self.frames.row(t).to_owned())
    }

    /// The sub-series of frames `from..to` (half-open, must be non-empty).
    pub fn slice_time(&self, from: usize, to: usize) -> Result<MeasureSeries> {
        if from >= to || to > self.len_t() {
            return Err(MeasureError::EmptySeries);
        }
        Ok(Self { frames: self.frames.slice(ndarray::s![from..to, ..]).to_owned() })
    }
}

fn validate_weights(weights: &[f64], offset: usize) -> Result<()> {
    let mut any_positive = false;
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() || w < 0.0 {
            return Err(MeasureError::InvalidWeight { index: offset + i, value: w });
        }
        if w > 0.0 {
            any_positive = true;
        }
    }
    if !any_positive {
        return Err(MeasureError::ZeroMeasure);
    }
    Ok(())
}
