//! Browser bindings for the demo page in `www/`. Results cross the boundary
//! as flat `Float64Array`s or JSON strings.

use std::collections::BTreeSet;

use facerig_core::animation::{single_image_ramp, Frame, FrameTrack};
use facerig_core::fitter::{project_weak_perspective, FitConfig, LandmarkBasis, Pose};
use facerig_core::model::{
    generate_synthetic_model, ExpressionParams, IdentityParams, LandmarkSet3D, EXPR_DIM,
};
use facerig_core::rig::{generate_synthetic_rig, BlendWeights, CharacterRig};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    rig: CharacterRig,
    basis: LandmarkBasis,
}

#[wasm_bindgen]
impl Demo {
    /// Synthetic model with `vertices` vertices and a `k`-channel rig.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, vertices: usize, k: usize) -> Result<Demo, JsError> {
        let model = generate_synthetic_model(seed, vertices, 10).map_err(js)?;
        let rig = generate_synthetic_rig(&model, k, seed + 1, 0.25).map_err(js)?;
        let basis =
            LandmarkBasis::new(&model, &IdentityParams::zeros(model.id_dim())).map_err(js)?;
        Ok(Demo { rig, basis })
    }

    pub fn channels(&self) -> Vec<String> {
        self.rig.channel_names()
    }

    /// Flat `[i0, j0, k0, i1, ...]` triangle indices.
    pub fn faces(&self) -> Vec<u32> {
        self.rig.faces.iter().flatten().copied().collect()
    }

    /// Flat xyz vertex positions of the rig under `alpha`.
    pub fn mesh(&self, alpha: Vec<f64>) -> Result<Vec<f64>, JsError> {
        let w = BlendWeights::new(alpha).map_err(js)?;
        Ok(self.rig.apply_blendweights(&w).map_err(js)?.0)
    }

    /// Renders landmarks for a random expression and pose, perturbs them
    /// with Gaussian pixel noise and fits them back.
    pub fn fit_noisy(&self, noise: f64, seed: u64) -> Result<String, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expr = Normal::new(0.0, 0.02).map_err(js)?;
        let gamma = ExpressionParams::new((0..EXPR_DIM).map(|_| expr.sample(&mut rng)).collect())
            .map_err(js)?;
        let aa = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let pose = Pose::from_axis_angle(aa, Vector2::zeros(), 1200.0).map_err(js)?;
        let truth = project_weak_perspective(
            &LandmarkSet3D::new(self.basis.landmarks(&gamma)).map_err(js)?,
            &pose,
        );
        let pixel = Normal::new(0.0, noise.max(0.0)).map_err(js)?;
        let observed =
            truth.map(|p| p + Vector2::new(pixel.sample(&mut rng), pixel.sample(&mut rng)));
        let r = self
            .basis
            .fit(&observed, &FitConfig::default())
            .map_err(js)?;
        let fitted = project_weak_perspective(
            &LandmarkSet3D::new(self.basis.landmarks(&r.gamma)).map_err(js)?,
            &r.pose,
        );
        let flat = |s: &facerig_core::model::LandmarkSet2D| {
            s.points()
                .iter()
                .flat_map(|p| [p.x, p.y])
                .collect::<Vec<_>>()
        };
        Ok(json!({
            "observed": flat(&observed),
            "fitted": flat(&fitted),
            "residual": r.residual,
            "iterations": r.iterations,
            "rotation_error": r.pose.rotation_distance(&pose),
        })
        .to_string())
    }
}

/// Interpolates a single-channel curve between the given keyframes.
#[wasm_bindgen]
pub fn interpolate(values: Vec<f64>, keyframes: Vec<usize>) -> Result<Vec<f64>, JsError> {
    let frames = values
        .into_iter()
        .map(|v| BlendWeights::new(vec![v]).map(Frame::from_alpha))
        .collect::<Result<Vec<_>, _>>()
        .map_err(js)?;
    let mut track = FrameTrack::new(frames).map_err(js)?;
    track
        .set_keyframes(keyframes.into_iter().collect::<BTreeSet<_>>())
        .map_err(js)?;
    track.interpolate();
    Ok(track
        .frames()
        .iter()
        .map(|f| f.alpha_current.get(0))
        .collect())
}

/// Neutral → peak → neutral curve for a single-channel peak value.
#[wasm_bindgen]
pub fn ramp(peak: f64, frames: usize) -> Result<Vec<f64>, JsError> {
    let track =
        single_image_ramp(&BlendWeights::new(vec![peak]).map_err(js)?, frames).map_err(js)?;
    Ok(track
        .frames()
        .iter()
        .map(|f| f.alpha_current.get(0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_and_interpolation() {
        assert_eq!(ramp(1.0, 5).unwrap(), [0.0, 0.5, 1.0, 0.5, 0.0]);
        let got = interpolate(vec![0.0, 0.9, 0.9, 0.9, 1.0], vec![0, 4]).unwrap();
        assert_eq!(got, [0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn demo_operations() {
        let d = Demo::new(1, 200, 6).unwrap();
        assert_eq!(d.channels().len(), 6);
        let mesh = d.mesh(vec![0.0; 6]).unwrap();
        assert_eq!(mesh, d.rig.base_vertices);
        assert!(d.faces().iter().all(|&i| (i as usize) < 200));
        let r: serde_json::Value = serde_json::from_str(&d.fit_noisy(0.0, 3).unwrap()).unwrap();
        assert!(r["rotation_error"].as_f64().unwrap() < 1e-3);
        assert_eq!(r["observed"].as_array().unwrap().len(), 136);
    }
}
