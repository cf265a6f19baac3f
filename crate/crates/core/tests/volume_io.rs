use std::fs;

use proptest::prelude::*;
use scope_core::diffcore::Tensor;
use scope_core::grid::Grid;
use scope_core::volume_io::*;
use scope_core::Error;

#[test]
fn short_payload_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.mhd");
    let g = Grid::new([4, 4, 2], [1.0, 1.0, 3.0], 0.0, vec![0.5f32; 32]).unwrap();
    write_volume(&g, &path).unwrap();
    let raw = dir.path().join("v.raw");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    match read_volume(&path) {
        Err(Error::Format { msg, .. }) => assert!(msg.contains("124") && msg.contains("128"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn element_type_is_checked_on_typed_reads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.mhd");
    write_volume(&Grid::new([2, 2, 1], [1.0; 3], 0.0, vec![0i32, 1, 2, 3]).unwrap(), &path).unwrap();
    assert!(matches!(read_float_volume(&path), Err(Error::Data(_))));
    assert_eq!(read_label_volume(&path).unwrap().data(), &[0, 1, 2, 3]);
}

#[test]
fn wrong_magic_is_not_a_checkpoint() {
    let mut bytes = Checkpoint::default().encode().unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert!(matches!(Checkpoint::decode(&bytes), Err(Error::NotACheckpoint(m)) if &m == b"XXXX"));
}

#[test]
fn newer_version_is_rejected() {
    let mut bytes = Checkpoint::default().encode().unwrap();
    bytes[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Version { .. })));
}

#[test]
fn payload_must_match_shape() {
    let mut ckpt = Checkpoint::default();
    ckpt.push(NamedTensor { name: "w".into(), dtype: DType::F32, shape: vec![2, 2], payload: vec![0; 12] });
    assert!(matches!(ckpt.encode(), Err(Error::Validation(_))));
}

#[test]
fn preview_windowing_endpoints() {
    assert_eq!(window_to_u8(-1000.0, -1000.0, 1000.0), 0);
    assert_eq!(window_to_u8(1000.0, -1000.0, 1000.0), 255);
    assert_eq!(window_to_u8(0.0, -1000.0, 1000.0), 128);
    assert_eq!(window_to_u8(-5000.0, -1000.0, 1000.0), 0);
    let g = Grid::new([3, 2, 1], [1.0; 3], 0.0, vec![-1000.0f32, 0.0, 1000.0, 5.0, 5.0, 5.0]).unwrap();
    let img = preview_image(&g, Plane::Axial, 0, (-1000.0, 1000.0)).unwrap();
    assert_eq!((img.width, img.height), (3, 2));
    assert_eq!(&img.pixels[..3], &[0, 128, 255]);
    assert!(img.to_pgm().starts_with(b"P5\n3 2\n255\n"));
    assert!(preview_image(&g, Plane::Coronal, 2, (-1.0, 1.0)).is_err());
}

fn grid_strategy() -> impl Strategy<Value = Grid<f32>> {
    (1usize..6, 1usize..6, 1usize..5, -200.0f64..200.0)
        .prop_flat_map(|(x, y, s, z0)| prop::collection::vec(any::<f32>(), x * y * s).prop_map(move |d| Grid::new([x, y, s], [0.7, 1.3, 2.5], z0, d).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn float_volumes_round_trip_bitwise(g in grid_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.mhd");
        write_volume(&g, &path).unwrap();
        let back = read_float_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), g.dims());
        prop_assert_eq!(back.spacing(), g.spacing());
        prop_assert_eq!(back.z_origin(), g.z_origin());
        let bits = |v: &Grid<f32>| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn checkpoints_round_trip(data in prop::collection::vec(-1e6f32..1e6, 1..40), seed in any::<u64>(), cfg in "[a-z =\n]{0,40}") {
        let mut ckpt = Checkpoint { config: cfg, rng_seed: seed, ..Default::default() };
        ckpt.push(NamedTensor::f32("a", &Tensor::new(&[data.len()], data.clone()).unwrap()));
        ckpt.push(NamedTensor::f64("b", &[2], &[0.25, -3.0]));
        let back = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..64) {
        let mut ckpt = Checkpoint::default();
        ckpt.push(NamedTensor::f64("x", &[3], &[1.0, 2.0, 3.0]));
        let bytes = ckpt.encode().unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
    }
}
