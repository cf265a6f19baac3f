use proptest::prelude::*;
use scope_core::grid::Grid;
use scope_core::preprocess::*;
use scope_core::rng::keyed;

/// Direct 2-D convolution with unnormalized-then-normalized Gaussian weights.
fn dense_gaussian(src: &[f32], w: usize, h: usize, sigma: f64, x: usize, y: usize) -> f64 {
    let r = (4.0 * sigma).ceil() as isize;
    let g = |i: isize| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
    let mut acc = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (sx, sy) = (x as isize + dx, y as isize + dy);
            if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                acc += g(dx) * g(dy) * src[sy as usize * w + sx as usize] as f64;
            }
        }
    }
    acc / norm
}

#[test]
fn interior_impulse_matches_dense_convolution() {
    let (w, h, sigma) = (24, 20, 1.3);
    let mut src = vec![0.0f32; w * h];
    src[10 * w + 12] = 1.0;
    src[9 * w + 11] = -0.5;
    let out = gaussian_filter_plane(&src, w, h, sigma);
    for y in 0..h {
        for x in 0..w {
            assert!((out[y * w + x] - dense_gaussian(&src, w, h, sigma, x, y)).abs() < 1e-12, "({x},{y})");
        }
    }
}

#[test]
fn constant_plane_is_preserved() {
    let src = vec![0.37f32; 9 * 7];
    for v in gaussian_filter_plane(&src, 9, 7, 2.0) {
        assert!((v - 0.37f32 as f64).abs() < 1e-12);
    }
}

#[test]
fn downsampling_halves_dims_and_doubles_spacing() {
    let g = Grid::new([8, 6, 3], [2.0, 2.5, 3.0], -12.0, vec![0.1f32; 8 * 6 * 3]).unwrap();
    let out = downsample_axial(&NormalizedVolume::new(g).unwrap(), 1.0).unwrap();
    assert_eq!(out.dims(), [4, 3, 3]);
    assert_eq!(out.spacing(), [4.0, 5.0, 3.0]);
    assert_eq!(out.z_origin(), -12.0);
    assert!(out.data().iter().all(|&v| (v - 0.1).abs() < 1e-6));
}

#[test]
fn full_chain_maps_hu_window_to_unit_range() {
    let hu = vec![-2000.0f32, -1024.0, 1024.0, 3072.0, 5000.0, 0.0, 0.0, 0.0];
    let g = Grid::new([2, 2, 2], [1.0; 3], 0.0, hu).unwrap();
    let n = clip_normalize(&g).unwrap();
    assert_eq!(&n.data()[..5], &[-1.0, -1.0, 0.0, 1.0, 1.0]);
    assert!((normalized_to_hu(hu_to_normalized(-300.0)) + 300.0).abs() < 1e-9);
}

#[test]
fn segments_stay_in_bounds() {
    let g = Grid::new([2, 2, 10], [1.0; 3], 0.0, (0..40).map(|i| i as f32 / 40.0).collect()).unwrap();
    let v = NormalizedVolume::new(g).unwrap();
    let seg = extract_segment(&v, 6, 4).unwrap();
    assert_eq!(seg.slices.len(), 4);
    assert_eq!(seg.slices[0], v.slice(6));
    assert!(extract_segment(&v, 7, 4).is_err());
    assert!(random_segment(&v, 11, &mut keyed(0, 0, 0)).is_err());
    let mut rng = keyed(1, 0, 0);
    let starts: std::collections::BTreeSet<usize> = (0..200).map(|_| random_segment(&v, 4, &mut rng).unwrap().start_index).collect();
    assert_eq!(starts, (0..=6).collect());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_is_linear(a in prop::collection::vec(-1.0f32..1.0, 48), b in prop::collection::vec(-1.0f32..1.0, 48), sigma in 0.5f64..3.0) {
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (fa, fb, fs) = (gaussian_filter_plane(&a, 8, 6, sigma), gaussian_filter_plane(&b, 8, 6, sigma), gaussian_filter_plane(&sum, 8, 6, sigma));
        for i in 0..48 {
            prop_assert!((fs[i] - fa[i] - fb[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn filter_does_not_leave_the_input_range(a in prop::collection::vec(-1.0f32..1.0, 48), sigma in 0.5f64..3.0) {
        let (lo, hi) = a.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for v in gaussian_filter_plane(&a, 6, 8, sigma) {
            prop_assert!(v >= lo as f64 - 1e-9 && v <= hi as f64 + 1e-9);
        }
    }
}
