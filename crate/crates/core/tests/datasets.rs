use da_core::net::{accuracy, architecture, train, BlobsSpec, Dataset, RingsSpec, TrainConfig, TrainingMode};
use da_core::Error;

fn rings(seed: u64) -> Dataset {
    RingsSpec { n: 64, classes: 4, hw: 10, noise: 0.05, contrast: 0.6, jitter: 0.15 }.generate(seed).unwrap()
}

#[test]
fn generation_is_byte_identical_per_seed() {
    assert_eq!(rings(5).to_bytes(), rings(5).to_bytes());
    assert_ne!(rings(5).to_bytes(), rings(6).to_bytes());
    let blobs = |s| BlobsSpec { n: 40, classes: 3, hw: 4, spread: 0.1 }.generate(s).unwrap().to_bytes();
    assert_eq!(blobs(1), blobs(1));
}

#[test]
fn rings_stay_in_pixel_range_and_cover_classes() {
    let d = rings(2);
    assert!(d.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    for c in 0..4 {
        assert!(d.labels().contains(&c));
    }
}

#[test]
fn rings_reject_bad_contrast_and_noise() {
    let base = RingsSpec { n: 8, classes: 2, hw: 8, noise: 0.05, contrast: 1.0, jitter: 0.1 };
    for bad in [RingsSpec { contrast: 0.0, ..base }, RingsSpec { contrast: 1.5, ..base }, RingsSpec { noise: -0.1, ..base }] {
        assert!(matches!(bad.generate(0), Err(Error::Config(_))));
    }
}

#[test]
fn file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dakd");
    let d = rings(3);
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
    let bytes = d.to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = Dataset::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.exit_code(), 3, "cut at {cut}: {err}");
    }
    match Dataset::from_bytes(&bytes[..bytes.len() - 1]) {
        Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual), (bytes.len(), bytes.len() - 1)),
        other => panic!("expected a truncation error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));
}

#[test]
fn blobs_are_linearly_separable() {
    let data = BlobsSpec { n: 400, classes: 4, hw: 6, spread: 0.1 }.generate(11).unwrap();
    let (tr, te) = data.split_at(300).unwrap();
    let specs = architecture("linear", data.image_shape(), 4).unwrap();
    let hyper = TrainConfig { lr: 0.1, epochs: 20, batch: 16, seed: 1, warmup: 0 };
    let m = train(&specs, &tr, &hyper, TrainingMode::Normal).unwrap();
    assert!(accuracy(&m, &te) >= 0.99, "probe accuracy {}", accuracy(&m, &te));
}
