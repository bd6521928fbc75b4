//! Per-pixel maps exchanged between data generation, the network, inference
//! and evaluation.

use crate::error::{invalid_arg, Result};

/// Binary edge map, row-major, `true` = edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_arg!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as `false`.
    #[inline]
    pub fn get_signed(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-pixel edge probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_arg!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    /// Pixels with `p ≥ threshold`.
    pub fn binarize(&self, threshold: f32) -> BinaryMap {
        BinaryMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| p >= threshold).collect(),
        }
    }
}

/// State of one pixel in a partially revealed edge map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeState {
    Background,
    Edge,
    Masked,
}

/// Edge map in which some pixels are hidden behind the mask symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TriStateEdgeMap {
    height: usize,
    width: usize,
    cells: Vec<EdgeState>,
}

impl TriStateEdgeMap {
    pub fn all_masked(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![EdgeState::Masked; height * width],
        }
    }

    pub fn from_binary(map: &BinaryMap) -> Self {
        Self {
            height: map.height(),
            width: map.width(),
            cells: map
                .data()
                .iter()
                .map(|&e| if e { EdgeState::Edge } else { EdgeState::Background })
                .collect(),
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<EdgeState>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(invalid_arg!(
                "{height}x{width} map needs {} cells, got {}",
                height * width,
                cells.len()
            ));
        }
        Ok(Self { height, width, cells })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[EdgeState] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> EdgeState {
        self.cells[y * self.width + x]
    }

    #[inline]
    pub fn state_at(&self, index: usize) -> EdgeState {
        self.cells[index]
    }

    #[inline]
    pub fn set_at(&mut self, index: usize, state: EdgeState) {
        self.cells[index] = state;
    }

    #[inline]
    pub fn is_masked_at(&self, index: usize) -> bool {
        self.cells[index] == EdgeState::Masked
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == EdgeState::Masked).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.cells.len() as f64
    }

    /// Edge pixels as a binary map; masked pixels read as background.
    pub fn to_binary(&self) -> BinaryMap {
        BinaryMap {
            height: self.height,
            width: self.width,
            data: self.cells.iter().map(|&c| c == EdgeState::Edge).collect(),
        }
    }
}
