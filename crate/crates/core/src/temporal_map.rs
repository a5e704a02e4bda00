//! Geometry of the 2D temporal proposal map.
//!
//! A video of `N` clips yields an `N x N` grid where cell `(i, j)` with
//! `i <= j` is the candidate segment spanning clips `i..=j`. Cells below the
//! diagonal are invalid and always carry zeros.

use crate::error::{Error, Result};

/// A closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start < 0.0 || start >= end {
            return Err(Error::invalid(format!(
                "segment [{start}, {end}] must be finite, non-negative and non-empty"
            )));
        }
        Ok(Segment { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Intersection over union of two intervals; touching intervals give 0.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end) - self.start.max(other.start);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.end.max(other.end) - self.start.min(other.start);
        (inter / union).clamp(0.0, 1.0)
    }

    /// Closed inclusion of `self` in `outer`.
    pub fn is_inside(&self, outer: &Segment) -> bool {
        outer.start <= self.start && self.end <= outer.end
    }
}

pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub fn new(i: usize, j: usize) -> Self {
        Cell { i, j }
    }
}

/// Enumeration of the valid (upper-triangular) cells of an `N x N` map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapIndex {
    num_clips: usize,
    duration: f64,
    cells: Vec<Cell>,
    // dense N*N -> position in `cells`
    lookup: Vec<Option<usize>>,
}

impl MapIndex {
    pub fn new(num_clips: usize, duration: f64) -> Result<Self> {
        if num_clips == 0 {
            return Err(Error::invalid("num_clips must be at least 1"));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid(format!("duration must be positive, got {duration}")));
        }
        let mut cells = Vec::with_capacity(num_clips * (num_clips + 1) / 2);
        let mut lookup = vec![None; num_clips * num_clips];
        for i in 0..num_clips {
            for j in i..num_clips {
                lookup[i * num_clips + j] = Some(cells.len());
                cells.push(Cell { i, j });
            }
        }
        Ok(MapIndex {
            num_clips,
            duration,
            cells,
            lookup,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.num_clips
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn clip_length(&self) -> f64 {
        self.duration / self.num_clips as f64
    }

    /// Valid cells in row-major order.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Position of `(i, j)` among the valid cells, if it is valid.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.num_clips || j >= self.num_clips {
            return None;
        }
        self.lookup[i * self.num_clips + j]
    }

    pub fn cell_to_segment(&self, cell: Cell) -> Result<Segment> {
        if cell.i > cell.j || cell.j >= self.num_clips {
            return Err(Error::invalid(format!(
                "cell ({}, {}) is not valid for a map of {} clips",
                cell.i, cell.j, self.num_clips
            )));
        }
        let len = self.clip_length();
        let end = if cell.j + 1 == self.num_clips {
            self.duration
        } else {
            (cell.j + 1) as f64 * len
        };
        Ok(Segment {
            start: cell.i as f64 * len,
            end,
        })
    }

    /// For every valid cell and each of the 9 taps of a 3x3 window (row-major
    /// over offsets -1..=1), the position of the neighbouring valid cell.
    pub fn neighbor_table(&self) -> Vec<[Option<usize>; 9]> {
        let n = self.num_clips as isize;
        self.cells
            .iter()
            .map(|c| {
                let mut taps = [None; 9];
                for (t, tap) in taps.iter_mut().enumerate() {
                    let di = (t / 3) as isize - 1;
                    let dj = (t % 3) as isize - 1;
                    let (ni, nj) = (c.i as isize + di, c.j as isize + dj);
                    if ni >= 0 && nj >= 0 && ni < n && nj < n {
                        *tap = self.position(ni as usize, nj as usize);
                    }
                }
                taps
            })
            .collect()
    }
}

pub fn build_map_index(num_clips: usize, duration: f64) -> Result<MapIndex> {
    MapIndex::new(num_clips, duration)
}

pub fn cell_to_segment(cell: Cell, index: &MapIndex) -> Result<Segment> {
    index.cell_to_segment(cell)
}

/// Row-major real matrix of `rows x dim`, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ClipFeatures {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("clip features must have at least one row and column"));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "clip feature buffer has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("clip features contain non-finite values"));
        }
        Ok(ClipFeatures { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, alpha: f64) -> ClipFeatures {
        ClipFeatures {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Averages `raw` rows into `target` equal-width bins over `[0, T)`.
///
/// Row `r` belongs to bin `b` when `b*T <= r*N < (b+1)*T`. A bin with no rows
/// copies the nearest earlier row.
pub fn resample_clips(raw: &ClipFeatures, target: usize) -> Result<ClipFeatures> {
    if target == 0 {
        return Err(Error::invalid("target clip count must be at least 1"));
    }
    let t = raw.rows();
    let d = raw.dim();
    let mut out = vec![0.0; target * d];
    for b in 0..target {
        // first row with r*N >= b*T
        let lo = (b * t).div_ceil(target);
        let hi = ((b + 1) * t).div_ceil(target);
        let dst = &mut out[b * d..(b + 1) * d];
        if hi > lo {
            for r in lo..hi {
                for (o, v) in dst.iter_mut().zip(raw.row(r)) {
                    *o += v;
                }
            }
            let count = (hi - lo) as f64;
            dst.iter_mut().for_each(|o| *o /= count);
        } else {
            dst.copy_from_slice(raw.row(lo.saturating_sub(1)));
        }
    }
    ClipFeatures::new(target, d, out)
}

/// Mean-pooled features for every valid cell, stored compactly in cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFeatures {
    pub dim: usize,
    /// `index.len() x dim`, row-major.
    pub data: Vec<f64>,
}

impl ProposalFeatures {
    pub fn cell(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Dense `N x N x dim` view with zeros at invalid cells.
    pub fn to_dense(&self, index: &MapIndex) -> Vec<f64> {
        let n = index.num_clips();
        let mut dense = vec![0.0; n * n * self.dim];
        for (pos, c) in index.cells().iter().enumerate() {
            let at = (c.i * n + c.j) * self.dim;
            dense[at..at + self.dim].copy_from_slice(self.cell(pos));
        }
        dense
    }
}

pub fn pool_proposal_features(clips: &ClipFeatures, index: &MapIndex) -> Result<ProposalFeatures> {
    if clips.rows() != index.num_clips() {
        return Err(Error::invalid(format!(
            "clip features have {} rows but the map expects {}",
            clips.rows(),
            index.num_clips()
        )));
    }
    let d = clips.dim();
    let mut data = vec![0.0; index.len() * d];
    for (pos, c) in index.cells().iter().enumerate() {
        let dst = &mut data[pos * d..(pos + 1) * d];
        for r in c.i..=c.j {
            for (o, v) in dst.iter_mut().zip(clips.row(r)) {
                *o += v;
            }
        }
        let count = (c.j - c.i + 1) as f64;
        dst.iter_mut().for_each(|o| *o /= count);
    }
    Ok(ProposalFeatures { dim: d, data })
}
