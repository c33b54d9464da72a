//! Detection grid geometry: equal non-overlapping cells over the input frames
//! and conversions between absolute event spans and cell-relative coordinates.
//!
//! Cells are half-open intervals `[i*W, (i+1)*W)`, so every real-valued center
//! in `[0, T]` maps to exactly one cell (a center of exactly `T` belongs to the
//! last cell). Frame positions are real-valued; only the grid dimensions are
//! integers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `[0, T)` frames into `C` equal cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGrid {
    total_frames: u32,
    num_cells: u32,
    cell_width: u32,
}

impl CellGrid {
    /// Fails unless `num_cells` divides `total_frames` exactly.
    pub fn new(total_frames: u32, num_cells: u32) -> Result<Self> {
        if total_frames == 0 || num_cells == 0 || total_frames % num_cells != 0 {
            return Err(Error::InvalidGrid {
                frames: total_frames,
                cells: num_cells,
            });
        }
        Ok(Self {
            total_frames,
            num_cells,
            cell_width: total_frames / num_cells,
        })
    }

    pub fn total_frames(&self) -> u32 {
        self.total_frames
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells as usize
    }

    pub fn cell_width(&self) -> u32 {
        self.cell_width
    }

    pub fn cell_start(&self, index: usize) -> f64 {
        (index as u32 * self.cell_width) as f64
    }

    /// Half-open `[start, end)` frame intervals of all cells, in order.
    pub fn cell_boundaries(&self) -> Vec<(f64, f64)> {
        let w = self.cell_width as f64;
        (0..self.num_cells as usize)
            .map(|i| (i as f64 * w, (i + 1) as f64 * w))
            .collect()
    }

    /// Cell index owning an event center. Centers must lie in `[0, T]`;
    /// `center == T` is assigned to the last cell.
    pub fn assign_cell(&self, center: f64) -> Result<usize> {
        let t = self.total_frames as f64;
        if !center.is_finite() || center < 0.0 || center > t {
            return Err(Error::CenterOutOfRange {
                center,
                total: self.total_frames,
            });
        }
        let idx = (center / self.cell_width as f64).floor() as usize;
        Ok(idx.min(self.num_cells as usize - 1))
    }

    /// Convert an absolute event span to cell-relative coordinates.
    pub fn to_cell_local(&self, span: &EventSpan) -> Result<CellLocal> {
        let center = span.center();
        let cell_index = self.assign_cell(center)?;
        if span.end() > self.total_frames as f64 {
            return Err(Error::InvalidSpan {
                start: span.start(),
                end: span.end(),
            });
        }
        Ok(CellLocal {
            cell_index,
            rel_center: center - self.cell_start(cell_index),
            duration: span.duration(),
        })
    }

    /// Reconstruct the absolute span from cell-relative coordinates, clamping
    /// both endpoints to `[0, T]`. Exact inverse of `to_cell_local` whenever
    /// no clamping occurs.
    pub fn to_absolute_span(&self, local: &CellLocal) -> Result<EventSpan> {
        let center = self.cell_start(local.cell_index) + local.rel_center;
        let t = self.total_frames as f64;
        let start = (center - local.duration / 2.0).clamp(0.0, t);
        let end = (center + local.duration / 2.0).clamp(0.0, t);
        EventSpan::new(start, end)
    }
}

/// A half-open event interval `[start, end)` in real-valued frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpan {
    start: f64,
    end: f64,
}

impl EventSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end <= start {
            return Err(Error::InvalidSpan { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Event location relative to one cell: the owning cell, the center offset
/// from the cell start, and the absolute duration. The duration may exceed
/// the cell width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLocal {
    pub cell_index: usize,
    pub rel_center: f64,
    pub duration: f64,
}
