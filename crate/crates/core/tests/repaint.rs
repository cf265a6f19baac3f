mod common;

use scope_core::diffusion::cosine_schedule;
use scope_core::diffusion::GaussianOracle;
use scope_core::repaint::{extend_fov, inpaint_context, Direction, ExtensionPlan, InpaintOptions, SliceMask};
use scope_core::rng::{keyed, normal_tensor};
use scope_core::Error;

use common::*;

#[test]
fn zero_new_slices_is_identity() {
    let mut rng = keyed(1, 0, 0);
    let vol = random_volume(&mut rng, TINY_SIDE, 20);
    let (vae, ldm) = (tiny_vae(1), tiny_ldm(1, 5));
    let ext = extend_fov(&vol, &ExtensionPlan::new(Direction::Inferior, 0, 16), &vae, &ldm, &mut rng).unwrap();
    assert_eq!(ext.volume, vol);
    assert!(ext.record.windows.is_empty());
    assert_eq!(ext.record.added_mm, 0.0);
}

#[test]
fn thirty_slices_add_ninety_mm() {
    let mut rng = keyed(2, 0, 0);
    let vol = random_volume(&mut rng, TINY_SIDE, 12);
    let (vae, ldm) = (tiny_vae(2), tiny_ldm(2, 4));
    for dir in [Direction::Inferior, Direction::Superior] {
        let ext = extend_fov(&vol, &ExtensionPlan::new(dir, 30, 16), &vae, &ldm, &mut keyed(2, 1, 0)).unwrap();
        assert_eq!(ext.volume.n_slices(), 42);
        assert_eq!(ext.record.added_mm, 90.0);
        let kept: usize = ext.record.windows.iter().map(|w| w.kept).sum();
        assert_eq!(kept, 30);
        let (lo0, hi0) = vol.grid().z_extent();
        let (lo1, hi1) = ext.volume.grid().z_extent();
        match dir {
            Direction::Inferior => {
                assert_eq!(ext.volume.z_origin(), vol.z_origin());
                assert!((hi1 - hi0 - 90.0).abs() < 1e-9);
            }
            Direction::Superior => {
                assert!((ext.record.z_origin_after - (vol.z_origin() - 90.0)).abs() < 1e-9);
                assert!((lo0 - lo1 - 90.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn fixed_seed_extension_is_reproducible() {
    let mut rng = keyed(3, 0, 0);
    let vol = random_volume(&mut rng, TINY_SIDE, 10);
    let (vae, ldm) = (tiny_vae(3), tiny_ldm(3, 5));
    let plan = ExtensionPlan::new(Direction::Superior, 9, 16);
    let a = extend_fov(&vol, &plan, &vae, &ldm, &mut keyed(33, 0, 0)).unwrap();
    let b = extend_fov(&vol, &plan, &vae, &ldm, &mut keyed(33, 0, 0)).unwrap();
    let c = extend_fov(&vol, &plan, &vae, &ldm, &mut keyed(34, 0, 0)).unwrap();
    assert_eq!(a.volume, b.volume);
    assert_ne!(a.volume, c.volume);
}

#[test]
fn too_little_context_is_reported() {
    let mut rng = keyed(4, 0, 0);
    let vol = random_volume(&mut rng, TINY_SIDE, 3);
    let r = extend_fov(&vol, &ExtensionPlan::new(Direction::Inferior, 4, 16), &tiny_vae(4), &tiny_ldm(4, 3), &mut rng);
    assert!(matches!(r, Err(Error::InsufficientContext { have: 3, need: 8 })));
}

#[test]
fn fully_known_mask_returns_input() {
    let s = cosine_schedule(10).unwrap();
    let mut rng = keyed(5, 0, 0);
    let z0 = normal_tensor::<f32>(&[16, 4], &mut rng);
    let model = GaussianOracle { variance: 1.0, schedule: s.clone() };
    let out = inpaint_context(&model, &z0, &SliceMask(vec![true; 16]), &s, InpaintOptions::default(), &mut rng).unwrap();
    assert_eq!(out, z0);
}

#[test]
fn acquired_rows_survive_resampling() {
    let s = cosine_schedule(12).unwrap();
    let mut rng = keyed(6, 0, 0);
    let z0 = normal_tensor::<f32>(&[8, 3], &mut rng);
    let model = GaussianOracle { variance: 1.0, schedule: s.clone() };
    let mask = SliceMask::trailing(8, 5);
    let opts = InpaintOptions { resample_repeats: 2, ..Default::default() };
    let out = inpaint_context(&model, &z0, &mask, &s, opts, &mut rng).unwrap();
    for r in 3..8 {
        assert_eq!(out.rows(r, 1).unwrap(), z0.rows(r, 1).unwrap());
    }
    assert!(out.all_finite());
}
