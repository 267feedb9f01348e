mod common;

use common::model;
use facerig_core::adapter::{
    continue_training, evaluate_mae, loss_mse, reference_grid, run_ablation_grid, train,
    Activation, AdapterConfig, AdapterNet, Checkpoint, TrainConfig, REFERENCE_GRID_MAE,
};
use facerig_core::datagen::{generate_dataset, GeneratedDataset, RuleSet, SamplePair, Split};
use facerig_core::fitter::FitConfig;
use facerig_core::model::{ExpressionParams, EXPR_DIM};
use facerig_core::rig::{generate_synthetic_rig, BlendWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [(Activation, bool); 4] = [
    (Activation::Relu, false),
    (Activation::Relu, true),
    (Activation::LEAKY_DEFAULT, false),
    (Activation::LEAKY_DEFAULT, true),
];

fn gamma(rng: &mut ChaCha8Rng) -> ExpressionParams {
    ExpressionParams::new((0..EXPR_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_net(act: Activation, clamp: bool, seed: u64) -> AdapterNet {
    let mut net = AdapterNet::init(AdapterConfig::new(3, 4, act, clamp), seed).unwrap();
    net.b2.fill(0.5);
    net
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::LeakyRelu { slope } => {
            if z > 0.0 {
                z
            } else {
                slope * z
            }
        }
    }
}

fn scalar_forward(net: &AdapterNet, g: &[f64]) -> Vec<f64> {
    let (h, k) = (net.config.hidden_dim, net.config.out_dim);
    let mut a = vec![0.0; h];
    for i in 0..h {
        let mut z = net.b1[i];
        for j in 0..EXPR_DIM {
            z += net.w1[(i, j)] * g[j];
        }
        a[i] = act(net.config.activation, z);
    }
    (0..k)
        .map(|c| {
            let mut o = net.b2[c];
            for i in 0..h {
                o += net.w2[(c, i)] * a[i];
            }
            if net.config.clamp_output {
                o.clamp(0.0, 1.0)
            } else {
                o
            }
        })
        .collect()
}

fn loss(net: &AdapterNet, g: &ExpressionParams, t: &[f64]) -> f64 {
    loss_mse(&net.forward(g), t).unwrap()
}

/// Pre-activations stay at least `margin` away from every kink.
fn clear_of_kinks(net: &AdapterNet, g: &ExpressionParams, margin: f64) -> bool {
    let x = nalgebra::DVector::from_column_slice(g.as_slice());
    let z1 = &net.w1 * &x + &net.b1;
    let a1 = z1.map(|z| act(net.config.activation, z));
    let z2 = &net.w2 * a1 + &net.b2;
    z1.iter().all(|z| z.abs() > margin)
        && (!net.config.clamp_output
            || z2
                .iter()
                .all(|z| z.abs() > margin && (z - 1.0).abs() > margin))
}

fn max_relative_fd_error(net: &AdapterNet, g: &ExpressionParams, t: &[f64]) -> f64 {
    let h = 1e-5;
    let grads = net.backward(g, t).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    let mut probe = net.clone();
    for idx in 0..net.w1.len() {
        let orig = probe.w1[idx];
        probe.w1[idx] = orig + h;
        let up = loss(&probe, g, t);
        probe.w1[idx] = orig - h;
        let down = loss(&probe, g, t);
        probe.w1[idx] = orig;
        check(grads.w1[idx], (up - down) / (2.0 * h));
    }
    for idx in 0..net.b1.len() {
        let orig = probe.b1[idx];
        probe.b1[idx] = orig + h;
        let up = loss(&probe, g, t);
        probe.b1[idx] = orig - h;
        let down = loss(&probe, g, t);
        probe.b1[idx] = orig;
        check(grads.b1[idx], (up - down) / (2.0 * h));
    }
    for idx in 0..net.w2.len() {
        let orig = probe.w2[idx];
        probe.w2[idx] = orig + h;
        let up = loss(&probe, g, t);
        probe.w2[idx] = orig - h;
        let down = loss(&probe, g, t);
        probe.w2[idx] = orig;
        check(grads.w2[idx], (up - down) / (2.0 * h));
    }
    for idx in 0..net.b2.len() {
        let orig = probe.b2[idx];
        probe.b2[idx] = orig + h;
        let up = loss(&probe, g, t);
        probe.b2[idx] = orig - h;
        let down = loss(&probe, g, t);
        probe.b2[idx] = orig;
        check(grads.b2[idx], (up - down) / (2.0 * h));
    }
    worst
}

#[test]
fn forward_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, (act, clamp)) in VARIANTS.into_iter().enumerate() {
        let net = AdapterNet::init(AdapterConfig::new(3, 4, act, clamp), i as u64).unwrap();
        for _ in 0..20 {
            let g = gamma(&mut rng);
            let fast = net.forward(&g);
            let slow = scalar_forward(&net, g.as_slice());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_net_and_clamp_saturation() {
    let cfg = AdapterConfig::new(2, 4, Activation::Relu, true);
    let zero = AdapterNet::zeros(cfg).unwrap();
    assert_eq!(zero.forward(&ExpressionParams::zeros()), vec![0.0, 0.0]);
    let mut net = zero.clone();
    net.b2[0] = -0.3;
    net.b2[1] = 1.2;
    assert_eq!(net.forward(&ExpressionParams::zeros()), vec![0.0, 1.0]);
    net.config.clamp_output = false;
    assert_eq!(net.forward(&ExpressionParams::zeros()), vec![-0.3, 1.2]);
}

#[test]
fn mse_cases() {
    assert_eq!(loss_mse(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), 0.0);
    assert_eq!(loss_mse(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.25);
    let (p, t) = ([0.1, 0.7, 0.3], [0.5, 0.2, 0.9]);
    let hand = ((0.1f64 - 0.5).powi(2) + (0.7f64 - 0.2).powi(2) + (0.3f64 - 0.9).powi(2)) / 3.0;
    assert!((loss_mse(&p, &t).unwrap() - hand).abs() <= 1e-15);
    assert!(loss_mse(&p, &t[..2]).is_err());
}

#[test]
fn finite_differences_agree_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, (act, clamp)) in VARIANTS.into_iter().enumerate() {
        let net = small_net(act, clamp, 10 + i as u64);
        let mut checked = 0;
        while checked < 20 {
            let g = gamma(&mut rng);
            if !clear_of_kinks(&net, &g, 1e-3) {
                continue;
            }
            let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let err = max_relative_fd_error(&net, &g, &t);
            assert!(err <= 1e-4, "{act:?} clamp={clamp}: {err:e}");
            checked += 1;
        }
    }
}

#[test]
fn saturated_channel_blocks_gradient() {
    let mut net = small_net(Activation::Relu, true, 3);
    net.b2[1] = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = gamma(&mut rng);
    let a = net.backward(&g, &[0.3, 0.2, 0.6]).unwrap();
    let b = net.backward(&g, &[0.3, 0.9, 0.6]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.b2[1], 0.0);
    assert!(a.w2.row(1).iter().all(|&v| v == 0.0));

    let out = net.forward(&g);
    let at_target = net.backward(&g, &out).unwrap();
    assert_eq!(at_target.max_abs(), 0.0);
}

fn dataset(k: usize, split: Split, seed: u64) -> GeneratedDataset {
    let rig = generate_synthetic_rig(model(), k, 7, 0.25).unwrap();
    generate_dataset(
        &rig,
        model(),
        &RuleSet::default(),
        split,
        &FitConfig::default(),
        seed,
    )
    .unwrap()
}

fn tiny_split() -> Split {
    Split {
        train: 200,
        val: 40,
        test: 40,
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let ds = dataset(6, tiny_split(), 1);
    let tc = TrainConfig {
        epochs: 15,
        seed: 3,
        ..TrainConfig::default()
    };
    let cfg = AdapterConfig::new(6, 32, Activation::LEAKY_DEFAULT, true);
    let (n1, mut r1) = train(cfg, &tc, &ds).unwrap();
    let (n2, mut r2) = train(cfg, &tc, &ds).unwrap();
    assert_eq!(n1, n2);
    assert!(r1.wall_clock_seconds >= 0.0);
    r1.wall_clock_seconds = 0.0;
    r2.wall_clock_seconds = 0.0;
    assert_eq!(r1, r2);
    assert_eq!((r1.train_mse.len(), r1.val_mae.len()), (15, 15));
    assert!(r1.train_mse.iter().all(|l| l.is_finite()));
    assert!(r1.train_mse[14] < r1.train_mse[0]);
    assert_eq!(
        r1.val_mae[r1.best_epoch],
        r1.val_mae.iter().copied().fold(f64::INFINITY, f64::min)
    );
    assert_eq!(r1.test_mae, evaluate_mae(&n1, &ds.test).unwrap());

    let other = TrainConfig { seed: 4, ..tc };
    assert_ne!(train(cfg, &other, &ds).unwrap().0, n1);
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let ds = dataset(4, tiny_split(), 2);
    let cfg = AdapterConfig::new(4, 16, Activation::Relu, true);
    let frozen = |epochs| TrainConfig {
        learning_rate: 0.0,
        epochs,
        ..TrainConfig::default()
    };
    let (a, ra) = train(cfg, &frozen(1), &ds).unwrap();
    let (b, rb) = train(cfg, &frozen(4), &ds).unwrap();
    assert_eq!(a, b);
    assert!(rb.val_mae.iter().all(|&v| v == rb.val_mae[0]));
    assert_eq!(ra.test_mae, rb.test_mae);

    let (c, _) = continue_training(&a, &ds.train, &frozen(1), 3).unwrap();
    let diff = (&c.w1 - &a.w1)
        .amax()
        .max((&c.b1 - &a.b1).amax())
        .max((&c.w2 - &a.w2).amax());
    assert!(diff <= 1e-12, "{diff:e}");
}

#[test]
fn training_rejects_mismatched_dataset() {
    let ds = dataset(4, tiny_split(), 2);
    let cfg = AdapterConfig::new(5, 16, Activation::Relu, true);
    assert!(train(cfg, &TrainConfig::default(), &ds).is_err());
    let bad = TrainConfig {
        learning_rate: f64::NAN,
        ..TrainConfig::default()
    };
    assert!(train(AdapterConfig::new(4, 16, Activation::Relu, true), &bad, &ds).is_err());
}

#[test]
fn constant_half_predictor_scores_a_quarter() {
    let k = 8;
    let mut net = AdapterNet::zeros(AdapterConfig::new(k, 4, Activation::Relu, true)).unwrap();
    net.b2.fill(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<SamplePair> = (0..1000)
        .map(|_| SamplePair {
            gamma: gamma(&mut rng),
            alpha: BlendWeights::new((0..k).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
        })
        .collect();
    let mae = evaluate_mae(&net, &pairs).unwrap();
    assert!((mae - 0.25).abs() <= 0.01, "{mae}");
    let perfect: Vec<SamplePair> = pairs
        .iter()
        .map(|p| SamplePair {
            gamma: p.gamma.clone(),
            alpha: BlendWeights::new(vec![0.5; k]).unwrap(),
        })
        .collect();
    assert_eq!(evaluate_mae(&net, &perfect).unwrap(), 0.0);
    assert!(evaluate_mae(&net, &[]).is_err());
}

#[test]
fn ablation_grid_rows() {
    let ds = dataset(5, tiny_split(), 3);
    let grid = reference_grid(5);
    let labels: Vec<String> = grid.iter().map(|c| c.label()).collect();
    assert_eq!(
        labels,
        [
            "ReLU/256",
            "ReLU/100",
            "ReLU/384",
            "LeakyReLU/256",
            "ReLU+Clamp/256",
            "LeakyReLU+Clamp/256"
        ]
    );
    assert_eq!(REFERENCE_GRID_MAE, [0.09, 0.10, 0.09, 0.09, 0.08, 0.07]);
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let rows = run_ablation_grid(&ds, &grid, &tc).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[0].test_mae <= w[1].test_mae));
}

#[test]
fn checkpoint_round_trip() {
    let net =
        AdapterNet::init(AdapterConfig::new(3, 5, Activation::LEAKY_DEFAULT, true), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::new(&net, Some(9), None).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.seed, Some(9));
    assert_eq!(back.to_net().unwrap(), net);

    let mut json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    json["b2"] = serde_json::json!([0.0]);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamped_output_stays_in_unit_range(seed in any::<u64>(), scale in 0.1f64..100.0, leaky in any::<bool>()) {
        let act = if leaky { Activation::LEAKY_DEFAULT } else { Activation::Relu };
        let net = AdapterNet::init(AdapterConfig::new(7, 12, act, true), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = ExpressionParams::new((0..EXPR_DIM).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        prop_assert!(net.forward(&g).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradients_hold_at_random_points(seed in any::<u64>(), variant in 0usize..4) {
        let (act, clamp) = VARIANTS[variant];
        let net = small_net(act, clamp, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31));
        let g = gamma(&mut rng);
        prop_assume!(clear_of_kinks(&net, &g, 1e-3));
        let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        prop_assert!(max_relative_fd_error(&net, &g, &t) <= 1e-4);
    }
}
