//! Utterance feature matrices: T frames by D dimensions, row-major.

use crate::error::{Error, Result};

/// A fixed-size acoustic feature matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_data(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix expects {} values ({}x{}), got {}",
                frames * dim,
                frames,
                dim,
                data.len()
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, frame: usize, d: usize) -> f64 {
        self.data[frame * self.dim + d]
    }

    #[inline]
    pub fn row(&self, frame: usize) -> &[f64] {
        let off = frame * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn row_mut(&mut self, frame: usize) -> &mut [f64] {
        let off = frame * self.dim;
        &mut self.data[off..off + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
