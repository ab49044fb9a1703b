use boss_core::data::*;
use boss_core::evaluator::*;
use boss_core::space::*;
use boss_core::substrate::Tensor;
use boss_core::trainer::*;
use boss_core::Error;

struct Fixture {
    splits: SplitSet,
    norm: Normalizer,
}

fn fixture() -> Fixture {
    let src = generate_synthetic(4, 128, &SyntheticSpec::default()).unwrap();
    let sizes = SplitSizes {
        nas_train: 64,
        nas_val: 24,
        oracle_train: 24,
        oracle_test: 16,
    };
    let splits = make_splits(&src, &sizes, 1).unwrap();
    let norm = Normalizer::fit(&splits.nas_train);
    Fixture { splits, norm }
}

fn settings(policy: AugmentPolicy) -> EvalSettings {
    EvalSettings {
        view_seed: 5,
        val_subset: 24,
        chunk: 12,
        augment: policy,
        ..EvalSettings::default()
    }
}

fn trained(space: &SearchSpaceDef, f: &Fixture) -> SiameseState {
    let mut s = SiameseState::new(space, 1).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        paths_per_step: 2,
        ..TrainConfig::default()
    };
    train_supernet(&mut s, &config, &f.splits.nas_train, &f.norm, 3, |_, _| {
        Ok(())
    })
    .unwrap();
    s
}

fn views(f: &Fixture, s: &EvalSettings) -> FixedViewSet {
    build_fixed_views(&f.splits.nas_val, &s.augment, s.view_seed, s.val_subset).unwrap()
}

#[test]
fn fixed_views_are_reproducible_and_distinct() {
    let f = fixture();
    let a = build_fixed_views(&f.splits.nas_val, &AugmentPolicy::full(), 3, 24).unwrap();
    let b = build_fixed_views(&f.splits.nas_val, &AugmentPolicy::full(), 3, 24).unwrap();
    assert_eq!(a, b);
    let per = a.x1.numel() / a.len();
    for i in 0..a.len() {
        let d: f64 = a.x1.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&a.x2.data()[i * per..(i + 1) * per])
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            / per as f64;
        assert!(d > 0.0, "sample {i}");
    }
}

#[test]
fn identity_policy_views_equal_source() {
    let f = fixture();
    let v = build_fixed_views(&f.splits.nas_val, &AugmentPolicy::none(), 3, 8).unwrap();
    let (src, _) = f.splits.nas_val.batch(&(0..8).collect::<Vec<_>>());
    assert_eq!(v.x1, src);
    assert_eq!(v.x2, src);
}

#[test]
fn singleton_center_is_the_member_and_zero_distance_without_augmentation() {
    let f = fixture();
    let space = SearchSpaceDef::mbconv_mini();
    let s = SiameseState::new(&space, 2).unwrap();
    let set = settings(AugmentPolicy::none());
    let v = views(&f, &set);
    let prefix = stem_prefix(&s, &v, &f.norm, set.chunk).unwrap();
    let path = enumerate_block_paths(&space, 0).unwrap()[5].clone();
    let out = path_output(&s, 0, &path, &prefix, set.chunk, false).unwrap();
    let center = population_center(&s, 0, std::slice::from_ref(&path), &prefix, set.chunk).unwrap();
    assert_eq!(center, out.v2);
    let l = rate_block_candidates(&s, 0, &[path], &center, &prefix, set.chunk).unwrap();
    assert_eq!(l, vec![0.0]);
}

#[test]
fn center_matches_recomputation_from_stored_vectors() {
    let f = fixture();
    let space = SearchSpaceDef::mbconv_mini();
    let s = trained(&space, &f);
    let set = settings(AugmentPolicy::full());
    let v = views(&f, &set);
    let prefix = stem_prefix(&s, &v, &f.norm, set.chunk).unwrap();
    let pop = enumerate_block_paths(&space, 0).unwrap();
    let center = population_center(&s, 0, &pop, &prefix, set.chunk).unwrap();
    let stored: Vec<Tensor> = pop
        .iter()
        .map(|p| path_output(&s, 0, p, &prefix, set.chunk, false).unwrap().v2)
        .collect();
    let dim = LATENT_DIM;
    for r in 0..v.len() {
        let mean: Vec<f64> = (0..dim)
            .map(|d| stored.iter().map(|t| t.row(r)[d]).sum::<f64>() / stored.len() as f64)
            .collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, m) in center.row(r).iter().zip(&mean) {
            assert!((c - m / n).abs() < 1e-10);
        }
    }
    let losses = rate_block_candidates(&s, 0, &pop, &center, &prefix, set.chunk).unwrap();
    assert!(losses.iter().all(|l| (0.0..=4.0).contains(l)));
}

#[test]
fn four_layer_block_traverses_256_paths() {
    let mut space = SearchSpaceDef::mbconv_mini();
    space.block_layers = vec![4, 2];
    assert_eq!(enumerate_block_paths(&space, 0).unwrap().len(), 256);
}

#[test]
fn planted_vectors_give_hand_computed_distances() {
    // two candidates over two samples with known unit vectors
    let a1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b1 = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let a2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let b2 = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let center = center_of(&[&a2, &b2]).unwrap();
    let h = 0.5f64.sqrt();
    for (c, e) in center.data().iter().zip([h, h, 1.0, 0.0]) {
        assert!((c - e).abs() < 1e-15);
    }
    // sample 1: |(1,0)-(h,h)|^2 = 2 - 2h; sample 2: |(0,1)-(1,0)|^2 = 2
    let la = distance_to_center(&a1, &center).unwrap();
    assert!((la - (2.0 - 2.0 * h + 2.0) / 2.0).abs() < 1e-15);
    let lb = distance_to_center(&b1, &center).unwrap();
    assert!((lb - (2.0 - 2.0 * h + 2.0) / 2.0).abs() < 1e-15);
}

#[test]
fn traversal_best_is_argmin_of_the_full_composite_table() {
    let f = fixture();
    let space = SearchSpaceDef::mbconv_mini();
    let s = trained(&space, &f);
    let set = settings(AugmentPolicy::full());
    let v = views(&f, &set);
    let out = traversal_search(&s, &v, &f.norm, &set).unwrap();
    let all = enumerate_architectures(&space, 1 << 16).unwrap();
    assert_eq!(all.len(), 4096);
    let table = rate_architecture_set(&s, &all, &v, &f.norm, &set, "t").unwrap();
    assert!(table.totals_consistent());
    let best = table.best().unwrap();
    assert_eq!(table.architectures[best], out.best.encode());
}

#[test]
fn evolution_over_full_enumeration_agrees_with_traversal() {
    let f = fixture();
    let space = SearchSpaceDef::mbconv_mini();
    let s = trained(&space, &f);
    let mut set = settings(AugmentPolicy::full());
    set.evolution = EvolutionConfig {
        pop_size: 16,
        generations: 1,
        mutation_rate: 0.0,
        seed: 3,
    };
    let v = views(&f, &set);
    let trav = traversal_search(&s, &v, &f.norm, &set).unwrap();
    let evo = evolutionary_search(&s, &v, &f.norm, &set).unwrap();
    for b in &trav.blocks {
        let gen1 = evo
            .history
            .iter()
            .find(|h| h.block == b.block + 1 && h.generation == 1)
            .unwrap();
        assert_eq!(gen1.best, encode_path(b.best_path()));
        assert_eq!(gen1.losses, b.losses);
    }
    assert_eq!(evo.best, trav.best);
    assert_eq!(evolutionary_search(&s, &v, &f.norm, &set).unwrap(), evo);
}

#[test]
fn hytra_evolution_members_are_valid_and_reproducible() {
    let f = fixture();
    let space = SearchSpaceDef::hytra_mini();
    let s = SiameseState::new(&space, 4).unwrap();
    let mut set = settings(AugmentPolicy::full());
    set.val_subset = 8;
    set.evolution = EvolutionConfig {
        pop_size: 6,
        generations: 3,
        mutation_rate: 1.0,
        seed: 11,
    };
    let v = views(&f, &set);
    let a = evolutionary_search(&s, &v, &f.norm, &set).unwrap();
    assert_eq!(a, evolutionary_search(&s, &v, &f.norm, &set).unwrap());
    assert_eq!(a.history.len(), space.block_count() * 3);
    validate_architecture(&space, &a.best).unwrap();
    // every member is a valid block path from some reachable entry scale
    for h in &a.history {
        let k = h.block - 1;
        let paths = enumerate_block_paths(&space, k).unwrap();
        for m in &h.members {
            assert!(paths.iter().any(|p| encode_path(p) == *m), "{m}");
        }
    }
}

#[test]
fn ratings_are_deterministic_and_separable() {
    let f = fixture();
    let space = SearchSpaceDef::mbconv_mini();
    let s = SiameseState::new(&space, 8).unwrap();
    let set = settings(AugmentPolicy::full());
    let v = views(&f, &set);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let archs = sample_architectures(&space, 10, &mut rng);
    let a = rate_architecture_set(&s, &archs, &v, &f.norm, &set, "c").unwrap();
    let b = rate_architecture_set(&s, &archs, &v, &f.norm, &set, "c").unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    for (row, t) in a.block_losses.iter().zip(&a.totals) {
        assert_eq!(row.iter().sum::<f64>(), *t);
    }
    let scaled = a.reweighted(vec![3.5; 3]).unwrap();
    assert_eq!(scaled.ranking(), a.ranking());
    assert_eq!(a.meta.prefix_policy, PREFIX_POLICY);
}

#[test]
fn paths_outside_the_rated_enumeration_are_rejected() {
    let blocks = vec![BlockRatings {
        block: 0,
        entry_scale: 0,
        paths: vec![vec![Gene::MbConv { index: 0 }]],
        losses: vec![0.5],
        best: 0,
    }];
    let arch = Architecture {
        blocks: vec![vec![Gene::MbConv { index: 1 }]],
    };
    let meta = RatingMeta {
        checkpoint: "c".into(),
        view_seed: 0,
        prefix_policy: PREFIX_POLICY.into(),
        lambda: vec![1.0],
        config_digest: String::new(),
    };
    let err = RatingTable::from_block_ratings(&blocks, &[arch], meta).unwrap_err();
    assert!(matches!(err, Error::UnknownBlockPath { block: 1, .. }));
}

#[test]
fn written_table_reads_back_with_consistent_totals() {
    let f = fixture();
    let space = SearchSpaceDef::nats_size_mini();
    let s = SiameseState::new(&space, 8).unwrap();
    let set = settings(AugmentPolicy::full());
    let v = views(&f, &set);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let archs = sample_architectures(&space, 3, &mut rng);
    let t = rate_architecture_set(&s, &archs, &v, &f.norm, &set, "epoch_000").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.csv");
    t.write(&path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap().lines().count(),
        2 + 3
    );
    let back = RatingTable::read(&path).unwrap();
    assert_eq!(back, t);
    for (row, total) in back.block_losses.iter().zip(&back.totals) {
        assert_eq!(row.iter().sum::<f64>(), *total);
    }
}
