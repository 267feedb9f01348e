mod common;

use common::{model, rel_err};
use facerig_core::datagen::{
    generate_dataset, repair_blendweights, sample_blendweights, DatasetGenerator, GeneratedDataset,
    RuleGroup, RuleSet, Split,
};
use facerig_core::fitter::{FitConfig, Regularization};
use facerig_core::rig::{expression_mixing, generate_synthetic_rig, BlendWeights, CharacterRig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rig(k: usize) -> CharacterRig {
    generate_synthetic_rig(model(), k, 7, 0.25).unwrap()
}

fn small_split() -> Split {
    Split {
        train: 300,
        val: 50,
        test: 50,
    }
}

fn rules() -> RuleSet {
    RuleSet {
        groups: vec![
            RuleGroup {
                channel_indices: vec![0, 1],
                max_sum: 1.0,
            },
            RuleGroup {
                channel_indices: vec![2, 3, 4],
                max_sum: 0.8,
            },
        ],
    }
}

#[test]
fn repair_examples() {
    let r = RuleSet {
        groups: vec![RuleGroup {
            channel_indices: vec![0, 1],
            max_sum: 1.0,
        }],
    };
    assert_eq!(
        repair_blendweights(vec![0.9, 0.9, 0.7], &r).as_slice(),
        &[0.5, 0.5, 0.7]
    );
    assert_eq!(
        repair_blendweights(vec![0.3, 0.6, 0.7], &r).as_slice(),
        &[0.3, 0.6, 0.7]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = sample_blendweights(10, &RuleSet::default(), &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(a, sample_blendweights(10, &RuleSet::default(), &mut rng));
    assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn rule_validation() {
    let bad = |channel_indices: Vec<usize>, max_sum: f64| RuleSet {
        groups: vec![RuleGroup {
            channel_indices,
            max_sum,
        }],
    };
    assert!(bad(vec![0, 1], 0.0).validate(3).is_err());
    assert!(bad(vec![0, 1], 2.5).validate(3).is_err());
    assert!(bad(vec![0, 0], 1.0).validate(3).is_err());
    assert!(bad(vec![0, 3], 1.0).validate(3).is_err());
    assert!(bad(vec![], 1.0).validate(3).is_err());
    assert!(bad(vec![0, 2], 2.0).validate(3).is_ok());
}

#[test]
fn split_parsing() {
    let s: Split = "8000,1000,1000".parse().unwrap();
    assert_eq!((s, s.total()), (Split::default(), 10_000));
    assert!("1,2".parse::<Split>().is_err());
    assert!("a,b,c".parse::<Split>().is_err());
}

#[test]
fn deterministic_with_exact_split_and_rules_held() {
    let rig = rig(12);
    let a = generate_dataset(
        &rig,
        model(),
        &rules(),
        small_split(),
        &FitConfig::default(),
        5,
    )
    .unwrap();
    let b = generate_dataset(
        &rig,
        model(),
        &rules(),
        small_split(),
        &FitConfig::default(),
        5,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (300, 50, 50));
    assert_eq!(a.rig_name, rig.name);
    assert_eq!(a.resampled, 0);
    for p in a.train.iter().chain(&a.val).chain(&a.test) {
        assert!(rules().is_satisfied(p.alpha.as_slice()));
    }
    let c = generate_dataset(
        &rig,
        model(),
        &rules(),
        small_split(),
        &FitConfig::default(),
        6,
    )
    .unwrap();
    assert_ne!(a.train[0], c.train[0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    a.save(&path).unwrap();
    assert_eq!(GeneratedDataset::load(&path).unwrap(), a);
}

#[test]
fn sample_streams_do_not_depend_on_order() {
    // sample i is the same whether the dataset has i+1 samples or many more
    let rig = rig(6);
    let short = Split {
        train: 5,
        val: 1,
        test: 1,
    };
    let a = generate_dataset(
        &rig,
        model(),
        &RuleSet::default(),
        short,
        &FitConfig::default(),
        9,
    )
    .unwrap();
    let b = generate_dataset(
        &rig,
        model(),
        &RuleSet::default(),
        small_split(),
        &FitConfig::default(),
        9,
    )
    .unwrap();
    assert_eq!(a.train[..], b.train[..5]);
}

#[test]
fn neutral_maps_to_neutral() {
    let rig = rig(25);
    let generator = DatasetGenerator::new(&rig, model(), FitConfig::default()).unwrap();
    let pair = generator.pair_for(BlendWeights::zeros(25)).unwrap();
    assert!(pair.gamma.norm() <= 1e-6);
    assert_eq!(
        generator
            .camera()
            .rotation_distance(&facerig_core::fitter::Pose::identity()),
        0.0
    );
    let neutral = generator.observe(&BlendWeights::zeros(25)).unwrap();
    assert!((neutral.width() - 200.0).abs() <= 1e-9);
    assert!(neutral.centroid().norm() <= 1e-9);
}

#[test]
fn noiseless_gamma_matches_mixing() {
    let rig = rig(25);
    let m = expression_mixing(model(), &rig).unwrap();
    let exact = FitConfig {
        reg_lambda: Regularization::Absolute(0.0),
        ..FitConfig::default()
    };
    let ds =
        generate_dataset(&rig, model(), &RuleSet::default(), small_split(), &exact, 3).unwrap();
    for p in ds.train.iter().take(100) {
        let expected = &m * DVector::from_column_slice(p.alpha.as_slice());
        assert!(rel_err(p.gamma.as_slice(), expected.as_slice()) <= 1e-3);
    }
}

#[test]
fn gamma_is_linear_in_alpha() {
    let rig = rig(25);
    let ds = generate_dataset(
        &rig,
        model(),
        &RuleSet::default(),
        small_split(),
        &FitConfig::default(),
        4,
    )
    .unwrap();
    let n = ds.train.len();
    let a = DMatrix::from_fn(n, 25, |i, j| ds.train[i].alpha.get(j));
    let g = DMatrix::from_fn(n, 64, |i, j| ds.train[i].gamma.as_slice()[j]);
    let coef = a.clone().svd(true, true).solve(&g, 1e-12).unwrap();
    let residual = (&a * coef - &g).norm() / g.norm();
    assert!(
        residual <= 1e-4,
        "relative regression residual {residual:e}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn repaired_samples_satisfy_rules(seed in any::<u64>(), max_a in 0.05f64..2.0, max_b in 0.05f64..3.0) {
        let rules = RuleSet {
            groups: vec![
                RuleGroup { channel_indices: vec![0, 1], max_sum: max_a },
                RuleGroup { channel_indices: vec![1, 2, 5], max_sum: max_b },
            ],
        };
        prop_assume!(rules.validate(6).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sample_blendweights(6, &rules, &mut rng);
        prop_assert!(rules.is_satisfied(a.as_slice()));
        prop_assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
