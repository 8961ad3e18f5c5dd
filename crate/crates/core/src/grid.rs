//! Grid containers shared by every stage: dense feature maps, agent poses,
//! and per-cell detection scores.
//!
//! All grids are row-major by `(row, col, channel)`. Row indexes the local
//! `y` axis and column the local `x` axis; the grid is centred on its owner,
//! so cell `(r, c)` has its centre at
//! `((c + 0.5 - W/2) * cell, (r + 0.5 - H/2) * cell)` in the owner's frame.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        check_dims(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Feature vector of the cell with flat index `row * W + col`.
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.width + col)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }
}

fn check_dims(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Shape(format!(
            "grid dimensions must be positive, got {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// Planar pose of an agent in world coordinates. Heading lives in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Local point of this frame mapped to world coordinates.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    /// World point expressed in this frame.
    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = wx - self.x;
        let dy = wy - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Metric layout of an agent-centred grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    /// Cell edge length in meters.
    pub cell_size: f64,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, cell_size: f64) -> Self {
        Self {
            height,
            width,
            cell_size,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Centre of cell `(row, col)` in the grid owner's frame.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5 - self.width as f64 / 2.0) * self.cell_size,
            (row as f64 + 0.5 - self.height as f64 / 2.0) * self.cell_size,
        )
    }

    /// Cell containing local point `(x, y)`, if inside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = (x / self.cell_size + self.width as f64 / 2.0).floor();
        let row = (y / self.cell_size + self.height as f64 / 2.0).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Half-extent of the grid in meters along x and y.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.cell_size / 2.0,
            self.height as f64 * self.cell_size / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl DetectionMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || scores.len() != height * width {
            return Err(Error::Shape(format!(
                "detection map {height}x{width} with {} scores",
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
            return Err(Error::Numeric(format!("detection score {s} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    /// Scores outside `observed` set to 0: no evidence, no detection.
    pub fn masked(&self, observed: &[bool]) -> Result<Self> {
        if observed.len() != self.scores.len() {
            return Err(Error::Shape(format!(
                "mask of {} cells for a {}-cell map",
                observed.len(),
                self.scores.len()
            )));
        }
        let scores = self
            .scores
            .iter()
            .zip(observed)
            .map(|(s, o)| if *o { *s } else { 0.0 })
            .collect();
        Self::new(self.height, self.width, scores)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}
