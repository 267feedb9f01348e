#![allow(dead_code)]

use std::sync::OnceLock;

use facerig_core::fitter::{project_weak_perspective, LandmarkBasis, Pose};
use facerig_core::model::{
    generate_synthetic_model, ExpressionParams, IdentityParams, LandmarkSet2D, LandmarkSet3D,
    MorphableModel, EXPR_DIM,
};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const MODEL_SEED: u64 = 42;

/// Default-sized synthetic model shared by every test in a binary.
pub fn model() -> &'static MorphableModel {
    static MODEL: OnceLock<MorphableModel> = OnceLock::new();
    MODEL.get_or_init(|| generate_synthetic_model(MODEL_SEED, 800, 80).unwrap())
}

pub fn basis() -> &'static LandmarkBasis {
    static BASIS: OnceLock<LandmarkBasis> = OnceLock::new();
    BASIS.get_or_init(|| {
        LandmarkBasis::new(model(), &IdentityParams::zeros(model().id_dim())).unwrap()
    })
}

/// γ with entries ~ N(0, sigma).
pub fn random_gamma<R: Rng>(rng: &mut R, sigma: f64) -> ExpressionParams {
    let n = Normal::new(0.0, sigma).unwrap();
    ExpressionParams::new((0..EXPR_DIM).map(|_| n.sample(rng)).collect()).unwrap()
}

/// Rotation up to ~0.6 rad about a random axis, pixel-scale camera.
pub fn random_pose<R: Rng>(rng: &mut R) -> Pose {
    let aa = Vector3::new(
        rng.random_range(-0.35..0.35),
        rng.random_range(-0.35..0.35),
        rng.random_range(-0.35..0.35),
    );
    let t = Vector2::new(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
    );
    Pose::from_axis_angle(aa, t, rng.random_range(800.0..2000.0)).unwrap()
}

pub fn observe(gamma: &ExpressionParams, pose: &Pose) -> LandmarkSet2D {
    let pts = LandmarkSet3D::new(basis().landmarks(gamma)).unwrap();
    project_weak_perspective(&pts, pose)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
