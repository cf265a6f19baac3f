use proptest::prelude::*;
use scope_core::phantom::*;
use scope_core::Error;

fn small() -> PhantomConfig {
    PhantomConfig { grid_xy: 32, pixel_spacing: 12.0, ..Default::default() }
}

#[test]
fn subjects_are_deterministic_and_distinct() {
    let cfg = small();
    let (a, la) = generate_subject(&cfg, 3).unwrap();
    let (b, lb) = generate_subject(&cfg, 3).unwrap();
    let (c, _) = generate_subject(&cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(a, c);
    let other_seed = PhantomConfig { seed: 1, ..small() };
    assert_ne!(generate_subject(&other_seed, 3).unwrap().0, a);
}

#[test]
fn every_default_organ_is_labelled() {
    let cfg = small();
    let (_, labels) = generate_subject(&cfg, 0).unwrap();
    for o in &cfg.organs {
        assert!(labels.data().contains(&o.id), "organ {} missing", o.name);
    }
    assert_eq!(cfg.organs.len(), 5);
}

#[test]
fn no_organs_leaves_every_voxel_unlabelled() {
    let cfg = PhantomConfig { organs: vec![], ..small() };
    let (_, labels) = generate_subject(&cfg, 0).unwrap();
    assert!(labels.data().iter().all(|&l| l == 0));
    assert!(organ_extents(&cfg, 0).unwrap().is_empty());
}

#[test]
fn crop_keeps_slices_with_centers_inside() {
    let cfg = small();
    let (vol, lab) = generate_subject(&cfg, 0).unwrap();
    // 48 mm at 3 mm spacing with centers at 1.5 + 3k.
    let (v, l) = crop_to_fov(&vol, &lab, &FovWindow::new(30.0, 78.0).unwrap()).unwrap();
    assert_eq!(v.n_slices(), 16);
    assert_eq!(l.n_slices(), 16);
    assert_eq!(v.z_origin(), 30.0);
    assert_eq!(v.slice(0), vol.slice(10));
    let outside = crop_to_fov(&vol, &lab, &FovWindow::new(500.0, 600.0).unwrap());
    assert!(matches!(outside, Err(Error::EmptyFov { .. })));
}

fn plan(chest: (f64, f64), abdomen: (f64, f64)) -> DatasetPlan {
    DatasetPlan {
        n_chest: 1,
        n_abdomen: 2,
        n_heldout: 1,
        chest_window: FovWindow::new(chest.0, chest.1).unwrap(),
        abdomen_window: FovWindow::new(abdomen.0, abdomen.1).unwrap(),
        n_s: 16,
    }
}

#[test]
fn datasets_are_written_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let (manifest, extents) = build_datasets(&cfg, &plan((0.0, 120.0), (96.0, 192.0)), dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 4);
    let idx: Vec<u64> = manifest.entries.iter().map(|e| e.subject_index).collect();
    assert_eq!(idx, vec![0, 1, 2, 3]);
    for e in &manifest.entries {
        assert!(dir.path().join(&e.path).exists());
        assert!(dir.path().join(&e.labels_path).exists());
    }
    assert_eq!(extents.len(), 4 * cfg.organs.len());
    assert_eq!(manifest.filter(&[DatasetTag::Abdomen]).entries.len(), 2);
}

#[test]
fn disjoint_windows_violate_the_bridge() {
    let dir = tempfile::tempdir().unwrap();
    let r = build_datasets(&small(), &plan((0.0, 90.0), (100.0, 192.0)), dir.path());
    assert!(matches!(r, Err(Error::BridgeViolation(_))));
}

#[test]
fn bridge_of_exactly_a_quarter_context_is_enough() {
    let cfg = small();
    // Overlap [96, 108] holds centers 97.5, 100.5, 103.5, 106.5.
    let p = plan((0.0, 108.0), (96.0, 192.0));
    assert_eq!(bridge_slices(&cfg, &p.chest_window, &p.abdomen_window), 4);
    let dir = tempfile::tempdir().unwrap();
    assert!(build_datasets(&cfg, &DatasetPlan { n_chest: 0, n_abdomen: 0, n_heldout: 0, ..p.clone() }, dir.path()).is_ok());
    let tight = plan((0.0, 105.0), (96.0, 192.0));
    assert!(build_datasets(&cfg, &DatasetPlan { n_chest: 0, n_abdomen: 0, n_heldout: 0, ..tight }, dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn neighbouring_slices_are_similar(subject in 0u64..1000) {
        let (vol, _) = generate_subject(&small(), subject).unwrap();
        let n = vol.slice_len() as f64;
        let mut worst = 0.0f64;
        for k in 1..vol.n_slices() {
            let d = vol.slice(k).iter().zip(vol.slice(k - 1)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n;
            worst = worst.max(d);
        }
        // Mean HU change between adjacent 3 mm slices.
        prop_assert!(worst < 60.0, "worst adjacent change {}", worst);
    }
}
