//! SSIM, PSNR, organ volume disagreement, extension reports and dataset FOV
//! coverage profiles.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::LabelVolume;
use crate::phantom::{OrganExtent, OrganSpec};
use crate::preprocess::{hu_to_normalized, NormalizedVolume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 2.0 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let t: Vec<f64> = (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = t.iter().sum();
        t.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of a `w × h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, &t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, &t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every window position fully inside a `w × h` image.
pub fn ssim(a: &[f32], b: &[f32], w: usize, h: usize, params: &SsimParams) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape(format!("ssim inputs of {} and {} pixels for {w}x{h}", a.len(), b.len())));
    }
    if w < params.window || h < params.window {
        return Err(Error::Shape(format!("{w}x{h} image is smaller than the {0}x{0} window", params.window)));
    }
    let taps = params.taps();
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&fa, w, h, &taps);
    let mu_b = filter_valid(&fb, w, h, &taps);
    let e_aa = filter_valid(&prod(&fa, &fa), w, h, &taps);
    let e_bb = filter_valid(&prod(&fb, &fb), w, h, &taps);
    let e_ab = filter_valid(&prod(&fa, &fb), w, h, &taps);
    let (c1, c2) = (params.c1(), params.c2());
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR, or the flag for bitwise-equal inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "db")]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.3}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("mse inputs of {} and {} elements", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / MSE)`.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::Range(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 { Psnr::Identical } else { Psnr::Db(10.0 * (peak * peak / m).log10()) })
}

/// Physical volume of `organ` in mm³.
pub fn organ_volume_mm3(labels: &LabelVolume, organ: i32) -> f64 {
    labels.data().iter().filter(|&&l| l == organ).count() as f64 * labels.voxel_volume()
}

/// `|V_syn − V_acq| / V_acq × 100`.
pub fn volume_disagreement(labels_acq: &LabelVolume, labels_syn: &LabelVolume, organ: i32) -> Result<f64> {
    if labels_acq.dims() != labels_syn.dims() || labels_acq.spacing() != labels_syn.spacing() {
        return Err(Error::Shape(format!("label grids differ: {:?}@{:?} vs {:?}@{:?}", labels_acq.dims(), labels_acq.spacing(), labels_syn.dims(), labels_syn.spacing())));
    }
    let v_acq = organ_volume_mm3(labels_acq, organ);
    if v_acq == 0.0 {
        return Err(Error::OrganAbsent(organ));
    }
    Ok((organ_volume_mm3(labels_syn, organ) - v_acq).abs() / v_acq * 100.0)
}

/// Labels voxels by the nearest class intensity. Applied identically to
/// ground truth and extended volumes so their organ volumes are comparable.
#[derive(Clone, Debug)]
pub struct IntensitySegmenter {
    /// `(label, normalized intensity, x side)`; side −1/+1 splits paired
    /// organs at the image midline, 0 means either side.
    classes: Vec<(i32, f64, i8)>,
}

impl IntensitySegmenter {
    /// Classes for air, soft tissue and every organ of the phantom.
    pub fn from_organs(organs: &[OrganSpec], air_hu: f64, body_hu: f64) -> Self {
        let mut classes = vec![(0, hu_to_normalized(air_hu), 0), (0, hu_to_normalized(body_hu), 0)];
        for o in organs {
            let paired = organs.iter().any(|p| p.id != o.id && p.hu == o.hu);
            let side = if paired { o.center_xy[0].signum() as i8 } else { 0 };
            classes.push((o.id, hu_to_normalized(o.hu), side));
        }
        Self { classes }
    }

    pub fn segment(&self, volume: &NormalizedVolume) -> LabelVolume {
        let [nx, ny, ns] = volume.dims();
        let mut out = Vec::with_capacity(nx * ny * ns);
        for k in 0..ns {
            let s = volume.slice(k);
            for y in 0..ny {
                for x in 0..nx {
                    let v = s[y * nx + x] as f64;
                    let side = if (x as f64 + 0.5) < nx as f64 / 2.0 { -1 } else { 1 };
                    let mut best = (f64::INFINITY, 0);
                    for &(label, mean, cs) in &self.classes {
                        if cs != 0 && cs != side {
                            continue;
                        }
                        let dist = (v - mean).abs();
                        if dist < best.0 {
                            best = (dist, label);
                        }
                    }
                    out.push(best.1);
                }
            }
        }
        volume.with_data(out).expect("same geometry")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SliceMetric {
    pub slice_index: usize,
    pub ssim: f64,
    pub psnr: Psnr,
    pub baseline_ssim: f64,
    pub baseline_psnr: Psnr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrganMetric {
    pub organ_id: i32,
    pub v_acq_mm3: f64,
    pub v_syn_mm3: f64,
    /// `None` when the organ is absent from the reference labels.
    pub disagreement_pct: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Mean PSNR over slices; identical only when every slice is.
fn aggregate_psnr(values: impl Iterator<Item = Psnr>) -> Psnr {
    let dbs: Vec<f64> = values.filter_map(Psnr::db).collect();
    if dbs.is_empty() {
        Psnr::Identical
    } else {
        Psnr::Db(Summary::of(&dbs).mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub slices: Vec<SliceMetric>,
    pub ssim: Summary,
    pub psnr: Psnr,
    pub baseline_ssim: Summary,
    pub baseline_psnr: Psnr,
    pub organs: Vec<OrganMetric>,
}

/// Which slices were imputed, and which acquired slice the copy baseline
/// replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputedSlices {
    pub indices: Vec<usize>,
    pub baseline_source: usize,
}

/// Per-slice SSIM/PSNR over the imputed slices only, the replicate-last-slice
/// baseline on the same slices, and per-organ volume disagreement.
pub fn eval_extension(
    ground_truth: &NormalizedVolume,
    extended: &NormalizedVolume,
    labels_gt: &LabelVolume,
    labels_ext: &LabelVolume,
    imputed: &ImputedSlices,
    organs: &[i32],
    params: &SsimParams,
) -> Result<MetricsReport> {
    if ground_truth.dims() != extended.dims() {
        return Err(Error::Shape(format!("ground truth {:?} vs extended {:?}", ground_truth.dims(), extended.dims())));
    }
    if imputed.indices.is_empty() {
        return Err(Error::NothingToEvaluate("no imputed slices in the mask".into()));
    }
    let [nx, ny, ns] = ground_truth.dims();
    if let Some(&bad) = imputed.indices.iter().chain([&imputed.baseline_source]).find(|&&k| k >= ns) {
        return Err(Error::Range(format!("slice {bad} of {ns}")));
    }
    let peak = params.range;
    let base = extended.slice(imputed.baseline_source);
    let slices = imputed
        .indices
        .iter()
        .map(|&k| {
            let (gt, ex) = (ground_truth.slice(k), extended.slice(k));
            Ok(SliceMetric {
                slice_index: k,
                ssim: ssim(gt, ex, nx, ny, params)?,
                psnr: psnr(gt, ex, peak)?,
                baseline_ssim: ssim(gt, base, nx, ny, params)?,
                baseline_psnr: psnr(gt, base, peak)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let organs = organs
        .iter()
        .map(|&id| {
            let disagreement_pct = match volume_disagreement(labels_gt, labels_ext, id) {
                Ok(r) => Some(r),
                Err(Error::OrganAbsent(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(OrganMetric { organ_id: id, v_acq_mm3: organ_volume_mm3(labels_gt, id), v_syn_mm3: organ_volume_mm3(labels_ext, id), disagreement_pct })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        ssim: Summary::of(&slices.iter().map(|s| s.ssim).collect::<Vec<_>>()),
        psnr: aggregate_psnr(slices.iter().map(|s| s.psnr)),
        baseline_ssim: Summary::of(&slices.iter().map(|s| s.baseline_ssim).collect::<Vec<_>>()),
        baseline_psnr: aggregate_psnr(slices.iter().map(|s| s.baseline_psnr)),
        slices,
        organs,
    })
}

impl MetricsReport {
    /// One row per imputed slice.
    pub fn slices_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["slice_index", "ssim", "psnr_db", "baseline_ssim", "baseline_psnr_db"]).map_err(csv_err)?;
        for s in &self.slices {
            w.write_record([s.slice_index.to_string(), format!("{:.6}", s.ssim), s.psnr.to_string(), format!("{:.6}", s.baseline_ssim), s.baseline_psnr.to_string()])
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
    }

    /// One row per organ.
    pub fn organs_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["organ_id", "v_acq_mm3", "v_syn_mm3", "disagreement_pct"]).map_err(csv_err)?;
        for o in &self.organs {
            let r = o.disagreement_pct.map_or("absent".to_string(), |r| format!("{r:.4}"));
            w.write_record([o.organ_id.to_string(), format!("{:.1}", o.v_acq_mm3), format!("{:.1}", o.v_syn_mm3), r]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "imputed slices: {}", self.slices.len())?;
        writeln!(
            f,
            "SSIM   {:.2}% ± {:.2}  (copy-last baseline {:.2}% ± {:.2})",
            100.0 * self.ssim.mean,
            100.0 * self.ssim.std,
            100.0 * self.baseline_ssim.mean,
            100.0 * self.baseline_ssim.std
        )?;
        writeln!(f, "PSNR   {} dB  (baseline {} dB)", self.psnr, self.baseline_psnr)?;
        for o in &self.organs {
            match o.disagreement_pct {
                Some(r) => writeln!(f, "organ {}: R = {r:.2}%", o.organ_id)?,
                None => writeln!(f, "organ {}: absent from reference", o.organ_id)?,
            }
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// FOV of one subject for coverage purposes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SubjectFov {
    pub subject_index: u64,
    pub z_lo: f64,
    pub z_hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OrganCoverage {
    pub organ_id: i32,
    pub covered: usize,
    pub subjects: usize,
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FovBin {
    pub z_lo: f64,
    pub z_hi: f64,
    /// FOVs starting in this bin.
    pub starts: usize,
    /// FOVs ending in this bin.
    pub ends: usize,
    /// FOVs spanning the bin center.
    pub covering: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageProfile {
    pub organs: Vec<OrganCoverage>,
    pub histogram: Vec<FovBin>,
}

/// Per organ, the fraction of subjects whose FOV contains the organ's whole
/// z-extent; plus a histogram of FOV endpoints with `bin_mm` wide bins.
pub fn coverage_profile(fovs: &[SubjectFov], extents: &[OrganExtent], bin_mm: f64) -> Result<CoverageProfile> {
    if fovs.is_empty() {
        return Err(Error::Data("coverage profile of an empty dataset".into()));
    }
    if !(bin_mm > 0.0) {
        return Err(Error::Range(format!("histogram bin width {bin_mm}")));
    }
    let mut by_organ: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
    let organ_ids: Vec<i32> = {
        let mut ids: Vec<i32> = extents.iter().map(|e| e.organ_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    for f in fovs {
        for &id in &organ_ids {
            let e = extents
                .iter()
                .find(|e| e.subject_index == f.subject_index && e.organ_id == id)
                .ok_or_else(|| Error::Data(format!("no extent of organ {id} for subject {}", f.subject_index)))?;
            let slot = by_organ.entry(id).or_default();
            slot.1 += 1;
            if f.z_lo <= e.z_lo && e.z_hi <= f.z_hi {
                slot.0 += 1;
            }
        }
    }
    let organs = by_organ.into_iter().map(|(organ_id, (covered, subjects))| OrganCoverage { organ_id, covered, subjects, fraction: covered as f64 / subjects as f64 }).collect();
    let lo = fovs.iter().map(|f| f.z_lo).fold(f64::INFINITY, f64::min);
    let hi = fovs.iter().map(|f| f.z_hi).fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / bin_mm).floor() as i64;
    let last = ((hi / bin_mm).ceil() as i64).max(first + 1);
    let bin_of = |z: f64| (((z / bin_mm).floor() as i64).min(last - 1) - first) as usize;
    let mut histogram: Vec<FovBin> = (first..last).map(|b| FovBin { z_lo: b as f64 * bin_mm, z_hi: (b + 1) as f64 * bin_mm, starts: 0, ends: 0, covering: 0 }).collect();
    for f in fovs {
        histogram[bin_of(f.z_lo)].starts += 1;
        histogram[bin_of(f.z_hi)].ends += 1;
        for bin in histogram.iter_mut() {
            let c = 0.5 * (bin.z_lo + bin.z_hi);
            if f.z_lo <= c && c <= f.z_hi {
                bin.covering += 1;
            }
        }
    }
    Ok(CoverageProfile { organs, histogram })
}

impl CoverageProfile {
    pub fn fraction(&self, organ_id: i32) -> Option<f64> {
        self.organs.iter().find(|o| o.organ_id == organ_id).map(|o| o.fraction)
    }

    pub fn organs_csv(&self) -> Result<Vec<u8>> {
        crate::phantom::to_csv(&self.organs)
    }

    pub fn histogram_csv(&self) -> Result<Vec<u8>> {
        crate::phantom::to_csv(&self.histogram)
    }
}
