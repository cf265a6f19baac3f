//! Voxel grids shared by volumes, label maps and normalized volumes.

use crate::error::{Error, Result};

/// X×Y×S voxel grid stored slice-major (x fastest, then y, then slice).
///
/// Slice `k` covers `[z_origin + k·dz, z_origin + (k+1)·dz)` so its center
/// sits at `z_origin + (k + 0.5)·dz`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    z_origin: f64,
    data: Vec<T>,
}

/// Intensities in Hounsfield units.
pub type Volume = Grid<f32>;

/// Integer organ labels, 0 is background.
pub type LabelVolume = Grid<i32>;

impl<T: Copy> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], z_origin: f64, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("grid spacing must be positive, got {spacing:?}")));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape(format!("grid {dims:?} needs {n} voxels, got {}", data.len())));
        }
        Ok(Self { dims, spacing, z_origin, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], z_origin: f64, value: T) -> Result<Self> {
        Self::new(dims, spacing, z_origin, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn z_origin(&self) -> f64 {
        self.z_origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn n_slices(&self) -> usize {
        self.dims[2]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn slice(&self, k: usize) -> &[T] {
        let n = self.slice_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [T] {
        let n = self.slice_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, s: usize) -> T {
        self.data[(s * self.dims[1] + y) * self.dims[0] + x]
    }

    pub fn z_center(&self, k: usize) -> f64 {
        self.z_origin + (k as f64 + 0.5) * self.spacing[2]
    }

    /// Physical z-range `[z_origin, z_origin + S·dz]`.
    pub fn z_extent(&self) -> (f64, f64) {
        (self.z_origin, self.z_origin + self.dims[2] as f64 * self.spacing[2])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Slices `[start, start + count)` as a new grid with an updated origin.
    pub fn sub_slices(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims[2] {
            return Err(Error::Range(format!("slices {start}..{} of {}", start + count, self.dims[2])));
        }
        let n = self.slice_len();
        Self::new([self.dims[0], self.dims[1], count], self.spacing, self.z_origin + start as f64 * self.spacing[2], self.data[start * n..(start + count) * n].to_vec())
    }

    /// Same geometry, different payload.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Grid<U>> {
        Grid::new(self.dims, self.spacing, self.z_origin, data)
    }
}
