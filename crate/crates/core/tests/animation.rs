mod common;

use std::collections::BTreeSet;

use common::{model, observe};
use facerig_core::adapter::{train, Activation, AdapterConfig, AdapterNet, TrainConfig};
use facerig_core::animation::{
    estimate_track, export_track, sample_keyframes, single_image_ramp, AnimationExport, Frame,
    FrameTrack,
};
use facerig_core::datagen::{generate_dataset, DatasetGenerator, RuleSet, Split};
use facerig_core::fitter::{FitConfig, Pose};
use facerig_core::hitl::PreferenceLedger;
use facerig_core::model::{ExpressionParams, IdentityParams};
use facerig_core::rig::{generate_synthetic_rig, BlendWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn track(values: &[Vec<f64>]) -> FrameTrack {
    FrameTrack::new(
        values
            .iter()
            .map(|v| Frame::from_alpha(BlendWeights::new(v.clone()).unwrap()))
            .collect(),
    )
    .unwrap()
}

fn channel(t: &FrameTrack, c: usize) -> Vec<f64> {
    t.frames().iter().map(|f| f.alpha_current.get(c)).collect()
}

#[test]
fn keyframe_rule() {
    assert_eq!(
        sample_keyframes(20, 5).unwrap(),
        BTreeSet::from([0, 5, 10, 15, 19])
    );
    assert_eq!(sample_keyframes(6, 5).unwrap(), BTreeSet::from([0, 5]));
    assert_eq!(sample_keyframes(1, 5).unwrap(), BTreeSet::from([0]));
    assert_eq!(sample_keyframes(7, 1).unwrap(), (0..7).collect());
    assert!(sample_keyframes(7, 0).is_err());

    let values: Vec<Vec<f64>> = (0..7).map(|i| vec![(i as f64 * 0.37) % 1.0]).collect();
    let mut t = track(&values);
    t.set_keyframes(sample_keyframes(7, 1).unwrap()).unwrap();
    t.interpolate();
    assert_eq!(
        channel(&t, 0),
        values.iter().map(|v| v[0]).collect::<Vec<_>>()
    );
}

#[test]
fn midpoint_and_constant_segments() {
    let mut values = vec![vec![0.3, 0.0]; 11];
    values[10] = vec![0.3, 1.0];
    let mut t = track(&values);
    t.interpolate();
    assert_eq!(t.frame(5).unwrap().alpha_current.get(1), 0.5);
    assert!(channel(&t, 0).iter().all(|&v| v == 0.3));
}

#[test]
fn two_segment_table() {
    let mut values = vec![vec![0.9]; 10];
    values[0] = vec![0.25];
    values[4] = vec![0.75];
    values[9] = vec![0.0];
    let mut t = track(&values);
    t.set_keyframes(BTreeSet::from([0, 4, 9])).unwrap();
    t.interpolate();
    let got = channel(&t, 0);
    // dyadic first segment is bit-exact
    assert_eq!(&got[..5], &[0.25, 0.375, 0.5, 0.625, 0.75]);
    let second = [0.75, 0.6, 0.45, 0.3, 0.15, 0.0];
    for (g, e) in got[4..].iter().zip(second) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}

#[test]
fn adding_a_keyframe_reinterpolates_both_sides() {
    let values: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 / 16.0]).collect();
    let mut t = track(&values);
    t.set_keyframes(BTreeSet::from([0, 5, 10])).unwrap();
    // move the end keyframes away from the auto values
    let mut edited = values.clone();
    edited[5] = vec![0.75];
    edited[10] = vec![0.25];
    let mut t2 = track(&edited);
    t2.set_keyframes(BTreeSet::from([0, 5, 10])).unwrap();
    t2.interpolate();
    assert!(t2.add_keyframe(7, None).unwrap());
    assert_eq!(t2.keyframes(), &BTreeSet::from([0, 5, 7, 10]));
    // frame 7 snaps to its own auto value, here the frame's initial value
    let v7 = edited[7][0];
    let got = channel(&t2, 0);
    assert_eq!(got[7], v7);
    assert!((got[6] - (0.75 + 0.5 * (v7 - 0.75))).abs() <= 1e-12);
    assert!((got[8] - (v7 + (0.25 - v7) / 3.0)).abs() <= 1e-12);
    assert!((got[9] - (v7 + 2.0 * (0.25 - v7) / 3.0)).abs() <= 1e-12);

    assert!(!t2.add_keyframe(7, None).unwrap());
    assert!(!t2.add_keyframe(10, None).unwrap());
    assert!(t2.add_keyframe(11, None).is_err());

    t.interpolate();
    assert!(t.add_keyframe(3, Some(&[0.5])).unwrap());
    assert_eq!(t.frame(3).unwrap().alpha_current.get(0), 3.0 / 16.0 + 0.5);
}

#[test]
fn ramp_tables() {
    let ramp = single_image_ramp(&BlendWeights::new(vec![1.0, 0.0]).unwrap(), 5).unwrap();
    assert_eq!(channel(&ramp, 0), vec![0.0, 0.5, 1.0, 0.5, 0.0]);
    assert_eq!(channel(&ramp, 1), vec![0.0; 5]);
    let even = single_image_ramp(&BlendWeights::new(vec![0.75]).unwrap(), 6).unwrap();
    let got = channel(&even, 0);
    let want = [0.0, 0.25, 0.5, 0.75, 0.375, 0.0];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-12);
    }
    assert_eq!(got[3], 0.75);
    assert!(single_image_ramp(&BlendWeights::zeros(1), 2).is_err());
}

fn fitted_single_frame() -> FrameTrack {
    let mut f = Frame::from_alpha(BlendWeights::new(vec![0.5, 1.0]).unwrap());
    f.gamma = Some(ExpressionParams::zeros());
    f.pose = Some(Pose::identity());
    FrameTrack::new(vec![f]).unwrap()
}

#[test]
fn ramp_expansion_keeps_source_fit() {
    let single = fitted_single_frame();
    let ramp = single.expand_ramp(7).unwrap();
    assert_eq!(ramp.len(), 7);
    assert_eq!(channel(&ramp, 1)[3], 1.0);
    assert!(ramp
        .frames()
        .iter()
        .all(|f| f.pose == Some(Pose::identity())));
    assert!(ramp
        .frames()
        .iter()
        .enumerate()
        .all(|(i, f)| f.gamma.is_some() == (i == 3)));
    assert!(ramp.expand_ramp(9).is_err());
}

#[test]
fn export_round_trip_and_channel_order() {
    let rig = generate_synthetic_rig(model(), 2, 1, 0.25).unwrap();
    let mut t = track(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![1.0 / 3.0, 0.7]]);
    t.interpolate();
    let ex = export_track(&t, &rig, 30.0, &PreferenceLedger::default()).unwrap();
    assert_eq!(ex.channels, vec!["bs_000", "bs_001"]);
    for (j, name) in ex.channels.iter().enumerate() {
        assert_eq!(name, &rig.blendshapes[j].name);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("anim.json");
    ex.save(&path).unwrap();
    let back = AnimationExport::load(&path).unwrap();
    assert_eq!(back, ex);
    let restored = back.alpha_current().unwrap();
    for (f, a) in t.frames().iter().zip(&restored) {
        assert_eq!(&f.alpha_current, a);
    }
    assert_eq!(std::fs::read(&path).unwrap(), ex.to_bytes().unwrap());

    let json: serde_json::Value = serde_json::from_slice(&ex.to_bytes().unwrap()).unwrap();
    for key in [
        "rig_name",
        "fps",
        "channels",
        "frames",
        "poses",
        "keyframes",
        "adjustments",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let one = fitted_single_frame();
    let ex1 = export_track(&one, &rig, 25.0, &PreferenceLedger::default()).unwrap();
    assert_eq!(
        (ex1.frames.len(), ex1.poses.len(), ex1.keyframes.len()),
        (1, 1, 1)
    );
    assert_eq!(ex1.poses[0].as_ref().unwrap().scale, 1.0);

    let rig3 = generate_synthetic_rig(model(), 3, 1, 0.25).unwrap();
    assert!(export_track(&t, &rig3, 30.0, &PreferenceLedger::default()).is_err());
}

#[test]
fn estimate_track_end_to_end() {
    let k = 25;
    let rig = generate_synthetic_rig(model(), k, 7, 0.25).unwrap();
    let split = Split {
        train: 2000,
        val: 200,
        test: 200,
    };
    let ds = generate_dataset(
        &rig,
        model(),
        &RuleSet::default(),
        split,
        &FitConfig::default(),
        11,
    )
    .unwrap();
    let tc = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let (net, report) = train(
        AdapterConfig::new(k, 128, Activation::LEAKY_DEFAULT, true),
        &tc,
        &ds,
    )
    .unwrap();

    // smooth α*(t) rendered through the frontal camera and a drifting head pose
    let generator = DatasetGenerator::new(&rig, model(), FitConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phase: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..6.28)).collect();
    let truth: Vec<BlendWeights> = (0..40)
        .map(|t| {
            BlendWeights::new(
                phase
                    .iter()
                    .map(|p| 0.5 + 0.45 * (0.2 * t as f64 + p).sin())
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let frames: Vec<_> = truth
        .iter()
        .map(|a| generator.observe(a).unwrap())
        .collect();
    let beta = IdentityParams::zeros(model().id_dim());
    let track = estimate_track(&frames, model(), &beta, &net, &FitConfig::default()).unwrap();
    assert_eq!(track.len(), 40);
    assert_eq!(track.keyframes(), &sample_keyframes(40, 5).unwrap());
    let mae: f64 = track
        .frames()
        .iter()
        .zip(&truth)
        .flat_map(|(f, a)| {
            f.alpha_auto
                .as_slice()
                .iter()
                .zip(a.as_slice())
                .map(|(x, y)| (x - y).abs())
        })
        .sum::<f64>()
        / (40 * k) as f64;
    assert!(
        mae <= report.test_mae + 0.02,
        "track MAE {mae} vs test {}",
        report.test_mae
    );

    let single = estimate_track(&frames[..1], model(), &beta, &net, &FitConfig::default()).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single.keyframes(), &BTreeSet::from([0]));

    let repeated = vec![frames[3].clone(); 10];
    let rep = estimate_track(&repeated, model(), &beta, &net, &FitConfig::default()).unwrap();
    let first = rep.frame(0).unwrap().alpha_auto.clone();
    for f in rep.frames() {
        for (a, b) in f.alpha_auto.as_slice().iter().zip(first.as_slice()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
    let again = estimate_track(&frames, model(), &beta, &net, &FitConfig::default()).unwrap();
    assert_eq!(again, track);
}

#[test]
fn unclamped_adapter_output_is_clamped_in_tracks() {
    let mut net = AdapterNet::zeros(AdapterConfig::new(2, 4, Activation::Relu, false)).unwrap();
    net.b2[0] = 1.7;
    net.b2[1] = -0.4;
    let frames = vec![observe(&ExpressionParams::zeros(), &Pose::identity())];
    let beta = IdentityParams::zeros(model().id_dim());
    let t = estimate_track(&frames, model(), &beta, &net, &FitConfig::default()).unwrap();
    assert_eq!(t.frame(0).unwrap().alpha_auto.as_slice(), &[1.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn interpolation_exact_at_keys_and_monotone(
        raw in proptest::collection::vec(0.0f64..=1.0, 2..40),
        interval in 1usize..8,
    ) {
        let n = raw.len();
        let mut t = track(&raw.iter().map(|&v| vec![v]).collect::<Vec<_>>());
        let keys = sample_keyframes(n, interval).unwrap();
        t.set_keyframes(keys.clone()).unwrap();
        t.interpolate();
        let got = channel(&t, 0);
        for &k in &keys {
            prop_assert_eq!(got[k], raw[k]);
        }
        let keys: Vec<usize> = keys.into_iter().collect();
        for w in keys.windows(2) {
            let seg = &got[w[0]..=w[1]];
            let up = raw[w[1]] >= raw[w[0]];
            for p in seg.windows(2) {
                let ordered = if up { p[1] >= p[0] } else { p[1] <= p[0] };
                prop_assert!(ordered);
            }
        }
        prop_assert!(got.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ramp_endpoints_are_zero(peak in proptest::collection::vec(0.0f64..=1.0, 1..6), total in 3usize..30) {
        let r = single_image_ramp(&BlendWeights::new(peak.clone()).unwrap(), total).unwrap();
        prop_assert!(r.frame(0).unwrap().alpha_current.as_slice().iter().all(|&v| v == 0.0));
        prop_assert!(r.frame(total - 1).unwrap().alpha_current.as_slice().iter().all(|&v| v == 0.0));
        prop_assert_eq!(r.frame(total / 2).unwrap().alpha_current.as_slice(), &peak[..]);
    }
}
