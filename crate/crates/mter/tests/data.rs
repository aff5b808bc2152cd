use std::path::PathBuf;

use mter::config::DATA_ENV;
use mter::data::{
    decode_idx, encode_idx, load_idx, make_open_set_split, save_idx, Dataset, DatasetSplit, IdxArray, IdxKind,
    SplitKind, TRAIN_LABELS,
};
use mter::defense::{build_queues, ClassSplit};
use mter::MterError;
use mter_nn::IMAGE_PIXELS;
use proptest::prelude::*;

fn images_strategy() -> impl Strategy<Value = IdxArray> {
    (0usize..6).prop_flat_map(|n| {
        prop::collection::vec(any::<u8>(), n * IMAGE_PIXELS).prop_map(move |px| IdxArray::images(n, px))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_images_round_trip(arr in images_strategy()) {
        let bytes = encode_idx(&arr);
        prop_assert_eq!(bytes.len(), 16 + arr.data.len());
        let back = decode_idx(&bytes, IdxKind::Images, "mem").unwrap();
        prop_assert_eq!(&back, &arr);
        prop_assert_eq!(encode_idx(&back), bytes);
    }

    #[test]
    fn idx_labels_round_trip(labels in prop::collection::vec(any::<u8>(), 0..300)) {
        let arr = IdxArray::labels(labels);
        let bytes = encode_idx(&arr);
        prop_assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
        prop_assert_eq!(decode_idx(&bytes, IdxKind::Labels, "mem").unwrap(), arr);
    }

    #[test]
    fn batches_visit_every_sample_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let pixels: Vec<u8> = (0..n * IMAGE_PIXELS).map(|i| (i / IMAGE_PIXELS) as u8).collect();
        let data = Dataset::new(pixels, labels, 3).unwrap();
        let batches: Vec<_> = data.batches(bs, seed).collect();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<u8> = batches.iter().flat_map(|b| (0..b.len()).map(|i| b.image(i)[0])).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).map(|i| i as u8).collect::<Vec<_>>());
        let again: Vec<_> = data.batches(bs, seed).collect();
        prop_assert_eq!(batches, again);
    }
}

#[test]
fn idx_files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x-idx3-ubyte");
    let arr = IdxArray::images(2, (0..2 * IMAGE_PIXELS).map(|i| i as u8).collect());
    save_idx(&path, &arr).unwrap();
    assert_eq!(load_idx(&path, IdxKind::Images).unwrap(), arr);
    assert!(matches!(load_idx(&path, IdxKind::Labels), Err(MterError::WrongMagic { .. })));
    assert!(load_idx(&dir.path().join("missing"), IdxKind::Images).is_err());
}

#[test]
fn dataset_idx_round_trip_and_label_checks() {
    let data = Dataset::new(vec![7; 3 * IMAGE_PIXELS], vec![0, 2, 1], 3).unwrap();
    let (img, lab) = data.to_idx();
    let back = Dataset::from_idx(&img, &lab).unwrap();
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.pixels(), data.pixels());
    assert!(Dataset::from_idx(&img, &IdxArray::labels(vec![0, 1])).is_err());
    assert!(Dataset::new(vec![0; IMAGE_PIXELS], vec![5], 3).is_err());
}

#[test]
fn sampling_is_seeded() {
    let data = Dataset::new(vec![0; 50 * IMAGE_PIXELS], (0..50).map(|i| i % 5).collect(), 5).unwrap();
    assert_eq!(data.sample(20, 4), data.sample(20, 4));
    assert_eq!(data.sample(20, 4).len(), 20);
    assert_eq!(data.sample(80, 4).len(), 50);
}

fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn load_mnist() -> DatasetSplit {
    let dir = mnist_dir();
    DatasetSplit::load_mnist(&dir)
        .unwrap_or_else(|e| panic!("MNIST not readable at {} ({e}); set {DATA_ENV}", dir.display()))
}

/// Per-class counts read straight from the label file bytes.
fn raw_label_counts() -> [usize; 10] {
    let bytes = std::fs::read(mnist_dir().join(TRAIN_LABELS)).unwrap();
    let mut counts = [0; 10];
    for &b in &bytes[8..] {
        counts[b as usize] += 1;
    }
    counts
}

#[test]
fn mnist_open_set_counts_match_label_file() {
    let split = load_mnist();
    assert_eq!(split.train.len(), 60_000);
    assert_eq!(split.test.len(), 10_000);
    let raw = raw_label_counts();
    assert_eq!(split.train.class_counts(), raw.to_vec());

    let two = make_open_set_split(&split, &[0, 1], &[5, 6, 7, 8, 9]).unwrap();
    assert_eq!(two.train.len(), raw[0] + raw[1]);
    assert_eq!(two.train.len(), 12_665);
    assert_eq!(two.train.num_classes(), 2);

    let open = make_open_set_split(&split, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9]).unwrap();
    assert_eq!(open.train.len(), raw[..5].iter().sum::<usize>());
    assert!(open.test.labels().iter().all(|l| (5..10).contains(l)));
    assert!(matches!(open.kind, SplitKind::OpenSet { .. }));
    assert!(matches!(
        make_open_set_split(&split, &[0, 1], &[1, 2]),
        Err(MterError::OverlappingClasses(_))
    ));
}

#[test]
fn neighbouring_seeds_give_different_orders() {
    let n = 10_000;
    // Tag each image with its index so the visiting order can be read back.
    let tagged: Vec<u8> = (0..n).flat_map(|i| {
        let mut img = vec![0u8; IMAGE_PIXELS];
        img[0] = (i % 256) as u8;
        img[1] = (i / 256) as u8;
        img
    }).collect();
    let data = Dataset::new(tagged, vec![0; n], 1).unwrap();
    let perm = |seed| -> Vec<usize> {
        let b = data.batches(n, seed).next().unwrap();
        (0..n).map(|i| b.image(i)[0] as usize + 256 * b.image(i)[1] as usize).collect()
    };
    for s in [0u64, 1, 41, u64::MAX - 1] {
        assert_ne!(perm(s), perm(s.wrapping_add(1)), "seed {s}");
    }
}

#[test]
fn mnist_source_queue_holds_every_low_digit() {
    let split = load_mnist();
    let raw = raw_label_counts();
    let classes = ClassSplit {
        source: vec![0, 1, 2, 3, 4],
        target: vec![5, 6, 7, 8, 9],
    };
    let q = build_queues(&split.train, &classes, 0).unwrap();
    assert_eq!(q.source.len(), raw[..5].iter().sum::<usize>());
    assert_eq!(q.target.len(), raw[5..].iter().sum::<usize>());
}
