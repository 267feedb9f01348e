#![allow(dead_code)]

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use facerig_core::adapter::{Activation, AdapterConfig, AdapterNet, Checkpoint};
use facerig_core::datagen::DatasetGenerator;
use facerig_core::fitter::{Convention, FitConfig, LandmarkSequence};
use facerig_core::model::{generate_synthetic_model, ModelFile, MorphableModel};
use facerig_core::rig::{generate_synthetic_rig, BlendWeights, CharacterRig};
use http_body_util::BodyExt;
use nalgebra::Vector2;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const K: usize = 8;

pub struct Fixture {
    pub model: MorphableModel,
    pub rig: CharacterRig,
    pub net: AdapterNet,
}

pub fn fixture() -> Fixture {
    let model = generate_synthetic_model(3, 200, 10).unwrap();
    let rig = generate_synthetic_rig(&model, K, 4, 0.25).unwrap();
    let net = AdapterNet::init(
        AdapterConfig::new(K, 32, Activation::LEAKY_DEFAULT, true),
        5,
    )
    .unwrap();
    Fixture { model, rig, net }
}

/// Image-convention landmarks of the rig driven by a slow ramp on channel 0.
pub fn sequence(f: &Fixture, frames: usize) -> LandmarkSequence {
    let gen = DatasetGenerator::new(&f.rig, &f.model, FitConfig::default()).unwrap();
    let frames = (0..frames)
        .map(|t| {
            let mut a = vec![0.1; K];
            a[0] = 0.8 * t as f64 / frames.max(2) as f64;
            gen.observe(&BlendWeights::new(a).unwrap())
                .unwrap()
                .map(|p| Vector2::new(320.0 + p.x, 240.0 - p.y))
        })
        .collect();
    LandmarkSequence {
        convention: Convention::ImageYDown,
        fps: Some(30.0),
        frames,
    }
}

pub fn upload(f: &Fixture, frames: usize) -> Value {
    json!({
        "rig": f.rig,
        "model": ModelFile::from(&f.model),
        "checkpoint": Checkpoint::new(&f.net, Some(5), None),
        "landmarks": sequence(f, frames),
    })
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&Value>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(serde_json::to_vec(b).unwrap())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        headers,
        bytes,
    }
}

pub async fn create(app: &Router, body: &Value) -> String {
    let r = call(app, "POST", "/projects", Some(body)).await;
    assert_eq!(
        r.status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&r.bytes)
    );
    r.json()["id"].as_str().unwrap().to_string()
}
