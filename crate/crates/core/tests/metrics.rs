mod common;

use proptest::prelude::*;
use scope_core::grid::Grid;
use scope_core::metrics::*;
use scope_core::phantom::OrganExtent;
use scope_core::rng::keyed;
use scope_core::Error;

use common::random_volume;

fn labels(counts: &[(i32, usize)], spacing: [f64; 3]) -> Grid<i32> {
    let mut data: Vec<i32> = counts.iter().flat_map(|&(id, n)| std::iter::repeat_n(id, n)).collect();
    data.resize(64, 0);
    Grid::new([4, 4, 4], spacing, 0.0, data).unwrap()
}

#[test]
fn disagreement_fixtures() {
    let acq = labels(&[(1, 20), (2, 5)], [1.0, 1.0, 3.0]);
    let syn = labels(&[(1, 25), (2, 5)], [1.0, 1.0, 3.0]);
    assert_eq!(volume_disagreement(&acq, &syn, 1).unwrap(), 25.0);
    assert_eq!(volume_disagreement(&acq, &syn, 2).unwrap(), 0.0);
    assert!(matches!(volume_disagreement(&acq, &syn, 3), Err(Error::OrganAbsent(3))));
    assert_eq!(organ_volume_mm3(&acq, 2), 15.0);
    let other = labels(&[(1, 20)], [2.0, 1.0, 3.0]);
    assert!(matches!(volume_disagreement(&acq, &other, 1), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn disagreement_ignores_voxel_size(a in 1usize..30, b in 0usize..30, s in 0.1f64..10.0) {
        let base = volume_disagreement(&labels(&[(7, a)], [1.0; 3]), &labels(&[(7, b)], [1.0; 3]), 7).unwrap();
        let scaled = volume_disagreement(&labels(&[(7, a)], [s, 1.0, 2.0 * s]), &labels(&[(7, b)], [s, 1.0, 2.0 * s]), 7).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9 * base.max(1.0));
        prop_assert!((base - (a as f64 - b as f64).abs() / a as f64 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = keyed(seed, 0, 0);
        let v = random_volume(&mut rng, 16, 2);
        let p = SsimParams::default();
        let ab = ssim(v.slice(0), v.slice(1), 16, 16, &p).unwrap();
        let ba = ssim(v.slice(1), v.slice(0), 16, 16, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
    }
}

fn fov(i: u64, lo: f64, hi: f64) -> SubjectFov {
    SubjectFov { subject_index: i, z_lo: lo, z_hi: hi }
}

fn extent(i: u64, organ: i32, lo: f64, hi: f64) -> OrganExtent {
    OrganExtent { subject_index: i, organ_id: organ, z_lo: lo, z_hi: hi }
}

#[test]
fn coverage_counts_whole_extents_only() {
    let fovs = [fov(0, 0.0, 100.0), fov(1, 50.0, 150.0)];
    let extents = [
        extent(0, 4, 60.0, 90.0),
        extent(1, 4, 60.0, 90.0),
        extent(0, 5, 90.0, 120.0),
        extent(1, 5, 90.0, 120.0),
        // Touching the FOV edge still counts as covered.
        extent(0, 6, 0.0, 10.0),
        extent(1, 6, 40.0, 60.0),
    ];
    let p = coverage_profile(&fovs, &extents, 25.0).unwrap();
    assert_eq!(p.fraction(4), Some(1.0));
    assert_eq!(p.fraction(5), Some(0.5));
    assert_eq!(p.fraction(6), Some(0.5));
    assert_eq!(p.fraction(9), None);
    assert_eq!(p.histogram.len(), 6);
    assert_eq!(p.histogram.iter().map(|b| b.starts).sum::<usize>(), 2);
    assert_eq!(p.histogram.iter().map(|b| b.ends).sum::<usize>(), 2);
    assert_eq!(p.histogram[2].covering, 2);
    assert_eq!(p.histogram[0].covering, 1);
    let csv = String::from_utf8(p.organs_csv().unwrap()).unwrap();
    assert!(csv.starts_with("organ_id,covered,subjects,fraction"));
}

#[test]
fn coverage_needs_subjects_and_extents() {
    assert!(matches!(coverage_profile(&[], &[], 10.0), Err(Error::Data(_))));
    assert!(matches!(coverage_profile(&[fov(0, 0.0, 1.0)], &[extent(1, 4, 0.0, 1.0)], 10.0), Err(Error::Data(_))));
    assert!(coverage_profile(&[fov(0, 0.0, 1.0)], &[], 0.0).is_err());
}

#[test]
fn perfect_extension_scores_one_against_a_worse_baseline() {
    let mut rng = keyed(3, 0, 0);
    let gt = random_volume(&mut rng, 16, 8);
    let lab = gt.with_data(vec![1i32; gt.data().len()]).unwrap();
    let imputed = ImputedSlices { indices: vec![5, 6, 7], baseline_source: 4 };
    let r = eval_extension(&gt, &gt, &lab, &lab, &imputed, &[1, 2], &SsimParams::default()).unwrap();
    assert!((r.ssim.mean - 1.0).abs() < 1e-12);
    assert_eq!(r.ssim.std, 0.0);
    assert_eq!(r.psnr, Psnr::Identical);
    assert!(r.baseline_ssim.mean < 0.5);
    assert!(matches!(r.baseline_psnr, Psnr::Db(_)));
    assert_eq!(r.organs[0].disagreement_pct, Some(0.0));
    assert_eq!(r.organs[1].disagreement_pct, None);
    let csv = String::from_utf8(r.slices_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
