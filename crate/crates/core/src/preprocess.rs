//! Intensity clipping and normalization, anti-aliased in-plane downsampling,
//! and fixed-length segment extraction.

use std::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};
use crate::phantom::{HU_MAX, HU_MIN};

/// Gaussian σ (pixels) of the anti-aliasing filter.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// A volume in normalized units; every voxel lies in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume(Grid<f32>);

impl NormalizedVolume {
    pub fn new(grid: Grid<f32>) -> Result<Self> {
        if let Some(bad) = grid.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("normalized voxel {bad} outside [-1, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.0
    }
}

impl Deref for NormalizedVolume {
    type Target = Grid<f32>;
    fn deref(&self) -> &Grid<f32> {
        &self.0
    }
}

pub fn hu_to_normalized(h: f64) -> f64 {
    2.0 * (h.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) - 1.0
}

pub fn normalized_to_hu(y: f64) -> f64 {
    (y + 1.0) / 2.0 * (HU_MAX - HU_MIN) + HU_MIN
}

/// Clamps to [−1024, 3072] HU and maps affinely onto [−1, 1].
pub fn clip_normalize(volume: &Volume) -> Result<NormalizedVolume> {
    if let Some(i) = volume.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Data(format!("NaN voxel at linear index {i}")));
    }
    let data = volume.data().iter().map(|&h| hu_to_normalized(h as f64) as f32).collect();
    NormalizedVolume::new(volume.with_data(data)?)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Half-sample symmetric reflection (`… b a | a b c … | c b …`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian filter of one `w × h` plane with reflect padding.
pub fn gaussian_filter_plane(src: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * src[y * w + reflect(x as isize + j as isize - r, w)] as f64).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Gaussian anti-aliasing then 2× decimation in X and Y (even pixels kept).
pub fn downsample_axial(volume: &NormalizedVolume, sigma: f64) -> Result<NormalizedVolume> {
    let [nx, ny, ns] = volume.dims();
    if nx % 2 != 0 || ny % 2 != 0 {
        return Err(Error::Shape(format!("in-plane dims must be even, got {nx}x{ny}")));
    }
    let (ox, oy) = (nx / 2, ny / 2);
    let mut data = Vec::with_capacity(ox * oy * ns);
    for k in 0..ns {
        let f = gaussian_filter_plane(volume.slice(k), nx, ny, sigma);
        for y in 0..oy {
            for x in 0..ox {
                data.push((f[2 * y * nx + 2 * x] as f32).clamp(-1.0, 1.0));
            }
        }
    }
    let [sx, sy, sz] = volume.spacing();
    NormalizedVolume::new(Grid::new([ox, oy, ns], [2.0 * sx, 2.0 * sy, sz], volume.z_origin(), data)?)
}

/// `n_s` consecutive slices starting at `start_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub slices: Vec<Vec<f32>>,
    pub start_index: usize,
}

pub fn extract_segment(volume: &NormalizedVolume, start_index: usize, n_s: usize) -> Result<Segment> {
    if n_s == 0 || start_index + n_s > volume.n_slices() {
        return Err(Error::Range(format!("segment {start_index}..{} of {} slices", start_index + n_s, volume.n_slices())));
    }
    Ok(Segment { slices: (start_index..start_index + n_s).map(|k| volume.slice(k).to_vec()).collect(), start_index })
}

/// Segment at a uniformly drawn valid start index.
pub fn random_segment(volume: &NormalizedVolume, n_s: usize, rng: &mut impl Rng) -> Result<Segment> {
    if n_s == 0 || n_s > volume.n_slices() {
        return Err(Error::Range(format!("segment of {n_s} from {} slices", volume.n_slices())));
    }
    let start = rng.random_range(0..=volume.n_slices() - n_s);
    extract_segment(volume, start, n_s)
}

/// Full preprocessing chain: clip/normalize, then downsample.
pub fn preprocess_volume(volume: &Volume, sigma: f64) -> Result<NormalizedVolume> {
    downsample_axial(&clip_normalize(volume)?, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(hu_to_normalized(-1024.0), -1.0);
        assert_eq!(hu_to_normalized(3072.0), 1.0);
        assert_eq!(hu_to_normalized(1024.0), 0.0);
        assert_eq!(hu_to_normalized(-5000.0), -1.0);
    }

    #[test]
    fn nan_voxel_is_data_error() {
        let v = Volume::new([2, 2, 1], [1.0; 3], 0.0, vec![0.0, f32::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(clip_normalize(&v), Err(Error::Data(_))));
    }

    #[test]
    fn kernel_sums_to_one_and_spans_four_sigma() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn odd_dims_rejected() {
        let g = Grid::new([3, 4, 1], [1.0; 3], 0.0, vec![0.0; 12]).unwrap();
        let v = NormalizedVolume::new(g).unwrap();
        assert!(matches!(downsample_axial(&v, 1.0), Err(Error::Shape(_))));
    }
}
