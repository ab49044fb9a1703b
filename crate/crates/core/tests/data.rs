use std::io::Write;

use boss_core::data::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cifar_record_round_trips_through_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bytes: Vec<u8> = (0..3 * RECORD_BYTES)
        .enumerate()
        .map(|(i, _)| {
            if i % RECORD_BYTES == 0 {
                rng.random_range(0..10)
            } else {
                rng.random()
            }
        })
        .collect();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(&bytes).unwrap();
    let set = load_cifar10_binary(&[file.path()]).unwrap();
    assert_eq!(set.len(), 3);
    let per = 3 * 32 * 32;
    let first = &set.images.data()[..per];
    assert_eq!(
        to_record(first, set.labels[0]),
        bytes[..RECORD_BYTES].to_vec()
    );
    assert!(set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn missing_cifar_file_is_an_error() {
    assert!(load_cifar10_binary(&["/nonexistent/data_batch_1.bin"]).is_err());
}

#[test]
fn crop_pixels_come_from_padded_canvas_at_recorded_offset() {
    let src = generate_synthetic(4, 8, &SyntheticSpec::default()).unwrap();
    let side = 32;
    let per = 3 * side * side;
    let policy = AugmentPolicy {
        crop: true,
        ..AugmentPolicy::none()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 0..8 {
        let img = &src.images.data()[n * per..(n + 1) * per];
        let (out, rec) = augment(img, side, &policy, &mut rng);
        let (dy, dx) = rec.crop_offset.unwrap();
        assert!(dy <= 2 * CROP_PAD && dx <= 2 * CROP_PAD);
        let padded = side + 2 * CROP_PAD;
        let mut canvas = vec![0.0; 3 * padded * padded];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    canvas[(c * padded + y + CROP_PAD) * padded + x + CROP_PAD] =
                        img[(c * side + y) * side + x];
                }
            }
        }
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    assert_eq!(
                        out[(c * side + y) * side + x],
                        canvas[(c * padded + y + dy) * padded + x + dx]
                    );
                }
            }
        }
    }
}

#[test]
fn nearest_neighbour_separates_synthetic_classes() {
    let set = generate_synthetic(11, 400, &SyntheticSpec::default()).unwrap();
    let per = 3 * 32 * 32;
    let img = |i: usize| &set.images.data()[i * per..(i + 1) * per];
    let (train, test) = (0..300, 300..400);
    let mut correct = 0;
    for t in test.clone() {
        let best = train
            .clone()
            .min_by(|&a, &b| {
                let da: f64 = img(a)
                    .iter()
                    .zip(img(t))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let db: f64 = img(b)
                    .iter()
                    .zip(img(t))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                da.total_cmp(&db)
            })
            .unwrap();
        correct += (set.labels[best] == set.labels[t]) as usize;
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.5, "1-NN accuracy {acc}");
}

#[test]
fn flip_frequency_is_one_half() {
    let policy = AugmentPolicy {
        flip: true,
        ..AugmentPolicy::none()
    };
    let img = vec![0.5; 3 * 4 * 4];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let flips = (0..n)
        .filter(|_| augment(&img, 4, &policy, &mut rng).1.flipped)
        .count();
    let se = (0.25 / n as f64).sqrt();
    assert!((flips as f64 / n as f64 - 0.5).abs() < 3.0 * se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmented_pixels_stay_in_unit_range(seed in any::<u64>()) {
        let src = generate_synthetic(seed, 8, &SyntheticSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment_batch(&src.images, &AugmentPolicy::full(), &mut rng);
        prop_assert_eq!(out.shape(), src.images.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn splits_never_overlap(seed in any::<u64>(), a in 1usize..20, b in 1usize..20, c in 1usize..20, d in 1usize..20) {
        let src = generate_synthetic(1, 80, &SyntheticSpec::default()).unwrap();
        let sizes = SplitSizes { nas_train: a, nas_val: b, oracle_train: c, oracle_test: d };
        let set = make_splits(&src, &sizes, seed).unwrap();
        let mut all: Vec<usize> = SplitId::ALL.iter().flat_map(|&id| set.get(id).indices.clone()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }
}
