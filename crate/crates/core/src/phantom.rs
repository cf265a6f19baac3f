//! Procedural anatomy phantoms and the two partial-FOV training datasets.
//!
//! A subject is a body ellipse (soft tissue inside, air outside) whose
//! cross-section changes smoothly along z, with ellipsoidal organs rendered
//! with soft edges. Every random draw comes from a stream keyed by
//! `(seed, subject_index, field)`, so subjects can be generated in any order
//! or in parallel.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelVolume, Volume};
use crate::rng::{field, keyed};
use crate::volume_io::write_volume;

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3072.0;

#[derive(Clone, Debug, PartialEq)]
pub struct OrganSpec {
    pub id: i32,
    pub name: String,
    /// Canonical z-center as a fraction of the grid's z extent.
    pub z_center: f64,
    /// In-plane center offset from the grid center, mm (x, y).
    pub center_xy: [f64; 2],
    /// Ellipsoid semi-axes, mm (x, y, z).
    pub semi_axes: [f64; 3],
    pub hu: f64,
    /// Half-width of the uniform per-subject intensity jitter, HU.
    pub hu_jitter: f64,
}

/// Bounds on per-subject variation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectJitter {
    /// Relative semi-axis jitter (uniform ±).
    pub axis: f64,
    /// Center jitter as a fraction of the grid extent (uniform ±).
    pub center: f64,
}

impl Default for SubjectJitter {
    fn default() -> Self {
        Self { axis: 0.10, center: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Voxels along X and Y.
    pub grid_xy: usize,
    /// Slices along z.
    pub grid_s: usize,
    /// In-plane voxel size, mm.
    pub pixel_spacing: f64,
    /// Slice thickness, mm.
    pub slice_thickness: f64,
    pub organs: Vec<OrganSpec>,
    pub jitter: SubjectJitter,
    pub body_hu: f64,
    pub air_hu: f64,
    /// Half-width of the uniform per-subject soft-tissue jitter, HU.
    pub body_hu_jitter: f64,
    /// Body ellipse semi-axes at the widest level, mm.
    pub body_semi_axes: [f64; 2],
    /// Width of the soft organ/body boundary, mm.
    pub edge_width: f64,
    pub seed: u64,
}

pub fn default_organs() -> Vec<OrganSpec> {
    let organ = |id, name: &str, z_center, center_xy, semi_axes, hu| OrganSpec { id, name: name.to_string(), z_center, center_xy, semi_axes, hu, hu_jitter: 10.0 };
    vec![
        organ(1, "lung_left", 0.30, [72.0, -5.0], [52.0, 72.0, 48.0], -800.0),
        organ(2, "lung_right", 0.30, [-72.0, -5.0], [52.0, 72.0, 48.0], -800.0),
        organ(3, "liver", 0.62, [-42.0, 0.0], [72.0, 62.0, 36.0], 60.0),
        organ(4, "kidney_left", 0.72, [62.0, 48.0], [26.0, 32.0, 33.0], 35.0),
        organ(5, "kidney_right", 0.72, [-62.0, 48.0], [26.0, 32.0, 33.0], 35.0),
    ]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_xy: 64,
            grid_s: 64,
            pixel_spacing: 6.0,
            slice_thickness: 3.0,
            organs: default_organs(),
            jitter: SubjectJitter::default(),
            body_hu: 0.0,
            air_hu: -1000.0,
            body_hu_jitter: 10.0,
            body_semi_axes: [165.0, 115.0],
            edge_width: 3.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_xy < 16 || self.grid_s < 16 {
            return Err(Error::Config(format!("grid must be at least 16 per axis, got {}x{}x{}", self.grid_xy, self.grid_xy, self.grid_s)));
        }
        if !(self.slice_thickness > 0.0) || !(self.pixel_spacing > 0.0) || !(self.edge_width > 0.0) {
            return Err(Error::Config("slice thickness, pixel spacing and edge width must be positive".into()));
        }
        let in_range = |h: f64| (HU_MIN..=HU_MAX).contains(&h);
        if !in_range(self.body_hu) || !in_range(self.air_hu) {
            return Err(Error::Config("background intensities outside [-1024, 3072] HU".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for o in &self.organs {
            if o.id <= 0 || !ids.insert(o.id) {
                return Err(Error::Config(format!("organ ids must be positive and unique (organ `{}`)", o.name)));
            }
            if !in_range(o.hu) {
                return Err(Error::Config(format!("organ `{}` intensity {} outside [-1024, 3072] HU", o.name, o.hu)));
            }
            if o.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!("organ `{}` needs positive semi-axes", o.name)));
            }
        }
        Ok(())
    }

    pub fn z_extent_mm(&self) -> f64 {
        self.grid_s as f64 * self.slice_thickness
    }

    fn xy_extent_mm(&self) -> f64 {
        self.grid_xy as f64 * self.pixel_spacing
    }
}

/// One organ as instantiated for a particular subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectOrgan {
    pub id: i32,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub hu: f64,
}

impl SubjectOrgan {
    /// Physical z-range the organ occupies, mm.
    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.semi_axes[2], self.center[2] + self.semi_axes[2])
    }
}

/// Per-subject anatomy: everything random about a subject, drawn once.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectAnatomy {
    pub organs: Vec<SubjectOrgan>,
    pub body_hu: f64,
    pub body_semi_axes: [f64; 2],
    /// z of the narrowest body level, mm.
    pub waist_z: f64,
}

fn sym(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

pub fn subject_anatomy(config: &PhantomConfig, subject_index: u64) -> Result<SubjectAnatomy> {
    config.validate()?;
    let mut shape_rng = keyed(config.seed, subject_index, field::PHANTOM_SHAPE);
    let mut hu_rng = keyed(config.seed, subject_index, field::PHANTOM_INTENSITY);
    let zext = config.z_extent_mm();
    let xyext = config.xy_extent_mm();
    let j = config.jitter;
    let body_scale = 1.0 + sym(&mut shape_rng, j.axis * 0.5);
    let body_semi_axes = [config.body_semi_axes[0] * body_scale, config.body_semi_axes[1] * body_scale];
    let waist_z = 0.78 * zext + sym(&mut shape_rng, j.center * zext);
    let organs = config
        .organs
        .iter()
        .map(|o| {
            let center = [
                o.center_xy[0] + sym(&mut shape_rng, j.center * xyext),
                o.center_xy[1] + sym(&mut shape_rng, j.center * xyext),
                o.z_center * zext + sym(&mut shape_rng, j.center * zext),
            ];
            let semi_axes =
                [o.semi_axes[0] * (1.0 + sym(&mut shape_rng, j.axis)), o.semi_axes[1] * (1.0 + sym(&mut shape_rng, j.axis)), o.semi_axes[2] * (1.0 + sym(&mut shape_rng, j.axis))];
            let hu = (o.hu + sym(&mut hu_rng, o.hu_jitter)).clamp(HU_MIN, HU_MAX);
            SubjectOrgan { id: o.id, center, semi_axes, hu }
        })
        .collect();
    let body_hu = (config.body_hu + sym(&mut hu_rng, config.body_hu_jitter)).clamp(HU_MIN, HU_MAX);
    Ok(SubjectAnatomy { organs, body_hu, body_semi_axes, waist_z })
}

fn smooth_step(signed_dist: f64, width: f64) -> f64 {
    0.5 * (1.0 - (signed_dist / width).tanh())
}

/// Body semi-axes at height `z`: a gentle waist narrowing.
fn body_axes_at(anat: &SubjectAnatomy, z: f64, zext: f64) -> [f64; 2] {
    let u = (z - anat.waist_z) / (0.18 * zext);
    let narrowing = 1.0 - 0.14 * (-u * u).exp() + 0.04 * (2.0 * PI * z / zext).sin();
    [anat.body_semi_axes[0] * narrowing, anat.body_semi_axes[1] * narrowing]
}

/// Renders one subject. Deterministic in `(config.seed, subject_index)`.
pub fn generate_subject(config: &PhantomConfig, subject_index: u64) -> Result<(Volume, LabelVolume)> {
    let anat = subject_anatomy(config, subject_index)?;
    let (n, s) = (config.grid_xy, config.grid_s);
    let (dxy, dz) = (config.pixel_spacing, config.slice_thickness);
    let zext = config.z_extent_mm();
    let half = n as f64 * dxy / 2.0;
    let w = config.edge_width;
    let mut hu = vec![0f32; n * n * s];
    let mut labels = vec![0i32; n * n * s];
    let mut memberships = vec![0.0; anat.organs.len()];
    for k in 0..s {
        let z = (k as f64 + 0.5) * dz;
        let [ba, bb] = body_axes_at(&anat, z, zext);
        for iy in 0..n {
            let y = (iy as f64 + 0.5) * dxy - half;
            for ix in 0..n {
                let x = (ix as f64 + 0.5) * dxy - half;
                let rb = ((x / ba).powi(2) + (y / bb).powi(2)).sqrt();
                let body = smooth_step((rb - 1.0) * ba.min(bb), w);
                let mut total = 0.0;
                for (m, o) in memberships.iter_mut().zip(&anat.organs) {
                    let d = [x - o.center[0], y - o.center[1], z - o.center[2]];
                    let r = ((d[0] / o.semi_axes[0]).powi(2) + (d[1] / o.semi_axes[1]).powi(2) + (d[2] / o.semi_axes[2]).powi(2)).sqrt();
                    let min_axis = o.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
                    *m = smooth_step((r - 1.0) * min_axis, w) * body;
                    total += *m;
                }
                let norm = if total > 1.0 { 1.0 / total } else { 1.0 };
                let mut value = config.air_hu + body * (anat.body_hu - config.air_hu);
                let mut best = (0.5, 0);
                for (m, o) in memberships.iter().zip(&anat.organs) {
                    value += m * norm * (o.hu - anat.body_hu);
                    if *m > best.0 {
                        best = (*m, o.id);
                    }
                }
                let idx = (k * n + iy) * n + ix;
                hu[idx] = value.clamp(HU_MIN, HU_MAX) as f32;
                labels[idx] = best.1;
            }
        }
    }
    let spacing = [dxy, dxy, dz];
    Ok((Volume::new([n, n, s], spacing, 0.0, hu)?, LabelVolume::new([n, n, s], spacing, 0.0, labels)?))
}

/// Closed z-window in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovWindow {
    pub z_lo: f64,
    pub z_hi: f64,
}

impl FovWindow {
    pub fn new(z_lo: f64, z_hi: f64) -> Result<Self> {
        if !(z_lo < z_hi) {
            return Err(Error::Config(format!("FOV window needs z_lo < z_hi, got [{z_lo}, {z_hi}]")));
        }
        Ok(Self { z_lo, z_hi })
    }

    pub fn contains(&self, z: f64) -> bool {
        self.z_lo <= z && z <= self.z_hi
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        self.z_lo <= lo && hi <= self.z_hi
    }

    pub fn intersect(&self, other: &FovWindow) -> Option<FovWindow> {
        let lo = self.z_lo.max(other.z_lo);
        let hi = self.z_hi.min(other.z_hi);
        (lo < hi).then_some(FovWindow { z_lo: lo, z_hi: hi })
    }
}

/// Indices `[first, last]` of slices whose centers lie in `window`.
fn slices_in_window(z_origin: f64, dz: f64, n_slices: usize, window: &FovWindow) -> Option<(usize, usize)> {
    let inside: Vec<usize> = (0..n_slices).filter(|&k| window.contains(z_origin + (k as f64 + 0.5) * dz)).collect();
    Some((*inside.first()?, *inside.last()?))
}

/// Slices of any grid whose centers lie within `window`.
pub fn crop_grid<T: Copy>(grid: &Grid<T>, window: &FovWindow) -> Result<Grid<T>> {
    let (first, last) = slices_in_window(grid.z_origin(), grid.spacing()[2], grid.n_slices(), window).ok_or(Error::EmptyFov { z_lo: window.z_lo, z_hi: window.z_hi })?;
    grid.sub_slices(first, last - first + 1)
}

/// Keeps exactly the slices whose centers lie within `window`.
pub fn crop_to_fov(volume: &Volume, labels: &LabelVolume, window: &FovWindow) -> Result<(Volume, LabelVolume)> {
    if volume.dims() != labels.dims() {
        return Err(Error::Shape(format!("volume {:?} vs labels {:?}", volume.dims(), labels.dims())));
    }
    let (first, last) = slices_in_window(volume.z_origin(), volume.spacing()[2], volume.n_slices(), window).ok_or(Error::EmptyFov { z_lo: window.z_lo, z_hi: window.z_hi })?;
    let count = last - first + 1;
    Ok((volume.sub_slices(first, count)?, labels.sub_slices(first, count)?))
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Chest,
    Abdomen,
    Heldout,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Chest => "chest",
            DatasetTag::Abdomen => "abdomen",
            DatasetTag::Heldout => "heldout",
        }
    }
}

/// One subject volume on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Header path relative to the manifest's directory.
    pub path: String,
    pub labels_path: String,
    pub dataset: DatasetTag,
    pub z_lo: f64,
    pub z_hi: f64,
    pub subject_index: u64,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn window(&self) -> FovWindow {
        FovWindow { z_lo: self.z_lo, z_hi: self.z_hi }
    }
}

/// Organ z-extent of one subject, from phantom ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganExtent {
    pub subject_index: u64,
    pub organ_id: i32,
    pub z_lo: f64,
    pub z_hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.entries)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        Ok(Self { entries: from_csv(bytes)? })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::volume_io::atomic_write(path, &self.to_csv()?)
    }

    pub fn filter(&self, tags: &[DatasetTag]) -> Manifest {
        Manifest { entries: self.entries.iter().filter(|e| tags.contains(&e.dataset)).cloned().collect() }
    }
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv encode: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv encode: {e}")))
}

pub(crate) fn from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(|e| Error::Format { offset: e.position().map_or(0, |p| p.byte()), msg: format!("csv: {e}") })).collect()
}

pub fn organ_extents(config: &PhantomConfig, subject_index: u64) -> Result<Vec<OrganExtent>> {
    Ok(subject_anatomy(config, subject_index)?
        .organs
        .iter()
        .map(|o| {
            let (z_lo, z_hi) = o.z_range();
            OrganExtent { subject_index, organ_id: o.id, z_lo, z_hi }
        })
        .collect())
}

/// Request for [`build_datasets`].
#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub n_chest: usize,
    pub n_abdomen: usize,
    /// Full-FOV subjects kept aside for evaluation.
    pub n_heldout: usize,
    pub chest_window: FovWindow,
    pub abdomen_window: FovWindow,
    /// Context length the overlap is checked against (needs ≥ n_s/4 slices).
    pub n_s: usize,
}

/// Number of phantom slice centers inside both windows.
pub fn bridge_slices(config: &PhantomConfig, a: &FovWindow, b: &FovWindow) -> usize {
    match a.intersect(b) {
        None => 0,
        Some(w) => (0..config.grid_s).filter(|&k| w.contains((k as f64 + 0.5) * config.slice_thickness)).count(),
    }
}

/// Generates, crops and writes both partial-FOV datasets (plus optional
/// held-out full-FOV subjects) into `out_dir`, returning the manifest and the
/// per-subject organ extents. Subject indices run chest, then abdomen, then
/// held-out, so they never collide.
pub fn build_datasets(config: &PhantomConfig, plan: &DatasetPlan, out_dir: &Path) -> Result<(Manifest, Vec<OrganExtent>)> {
    config.validate()?;
    let bridge = bridge_slices(config, &plan.chest_window, &plan.abdomen_window);
    let need = (plan.n_s / 4).max(1);
    if bridge < need {
        return Err(Error::BridgeViolation(format!(
            "chest window [{}, {}] and abdomen window [{}, {}] share {bridge} slices, need at least {need}",
            plan.chest_window.z_lo, plan.chest_window.z_hi, plan.abdomen_window.z_lo, plan.abdomen_window.z_hi
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut jobs: Vec<(DatasetTag, u64, Option<FovWindow>)> = Vec::new();
    let mut next = 0u64;
    for (tag, count, window) in
        [(DatasetTag::Chest, plan.n_chest, Some(plan.chest_window)), (DatasetTag::Abdomen, plan.n_abdomen, Some(plan.abdomen_window)), (DatasetTag::Heldout, plan.n_heldout, None)]
    {
        for _ in 0..count {
            jobs.push((tag, next, window));
            next += 1;
        }
    }
    let full = FovWindow { z_lo: 0.0, z_hi: config.z_extent_mm() };
    let entries = jobs
        .par_iter()
        .map(|&(tag, idx, window)| -> Result<ManifestEntry> {
            let (vol, lab) = generate_subject(config, idx)?;
            let (vol, lab) = match window {
                Some(w) => crop_to_fov(&vol, &lab, &w)?,
                None => (vol, lab),
            };
            let w = window.unwrap_or(full);
            let stem = format!("{}_{idx:03}", tag.as_str());
            let path = PathBuf::from(format!("{stem}.mhd"));
            let labels_path = PathBuf::from(format!("{stem}_labels.mhd"));
            write_volume(&vol, &out_dir.join(&path))?;
            write_volume(&lab, &out_dir.join(&labels_path))?;
            Ok(ManifestEntry {
                path: path.to_string_lossy().into_owned(),
                labels_path: labels_path.to_string_lossy().into_owned(),
                dataset: tag,
                z_lo: w.z_lo,
                z_hi: w.z_hi,
                subject_index: idx,
                seed: config.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut extents = Vec::new();
    for e in &entries {
        extents.extend(organ_extents(config, e.subject_index)?);
    }
    Ok((Manifest { entries }, extents))
}

pub fn write_extents(extents: &[OrganExtent], path: &Path) -> Result<()> {
    crate::volume_io::atomic_write(path, &to_csv(extents)?)
}

pub fn read_extents(path: &Path) -> Result<Vec<OrganExtent>> {
    from_csv(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { grid_xy: 32, grid_s: 32, pixel_spacing: 12.0, slice_thickness: 6.0, ..Default::default() }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.grid_xy = 8;
        assert!(matches!(generate_subject(&c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.organs[0].hu = 5000.0;
        assert!(matches!(generate_subject(&c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.organs[1].id = c.organs[0].id;
        assert!(c.validate().is_err());
        assert!(FovWindow::new(3.0, 3.0).is_err());
    }

    #[test]
    fn intensities_stay_in_clip_range() {
        let (v, _) = generate_subject(&small(), 3).unwrap();
        assert!(v.data().iter().all(|&h| (HU_MIN as f32..=HU_MAX as f32).contains(&h)));
    }

    #[test]
    fn window_below_origin_is_empty() {
        let (v, l) = generate_subject(&small(), 0).unwrap();
        let w = FovWindow::new(-50.0, -1.0).unwrap();
        assert!(matches!(crop_to_fov(&v, &l, &w), Err(Error::EmptyFov { .. })));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                path: "chest_000.mhd".into(),
                labels_path: "chest_000_labels.mhd".into(),
                dataset: DatasetTag::Chest,
                z_lo: 0.0,
                z_hi: 112.5,
                subject_index: 0,
                seed: 9,
            }],
        };
        assert_eq!(Manifest::from_csv(&m.to_csv().unwrap()).unwrap(), m);
    }
}
