//! Character rigs: a base mesh plus K named blendshape offsets.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::io;
use crate::model::{
    grid_faces, LandmarkSet3D, MorphableModel, VertexPositions, EXPR_DIM, NUM_LANDMARKS,
};

/// Blend weights α, every entry in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BlendWeights(Vec<f64>);

impl BlendWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ValueOutOfRange {
                what: "blend weight",
                value: v,
            });
        }
        Ok(Self(values))
    }

    /// Clamps every entry into [0, 1]; NaN maps to 0.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, channel: usize) -> f64 {
        self.0[channel]
    }

    pub fn set(&mut self, channel: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ValueOutOfRange {
                what: "value",
                value,
            });
        }
        self.0[channel] = value;
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

impl TryFrom<Vec<f64>> for BlendWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BlendWeights> for Vec<f64> {
    fn from(b: BlendWeights) -> Self {
        b.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blendshape {
    pub name: String,
    pub delta: Vec<f64>,
}

/// Plain-data rig matching the rig file layout. [`CharacterRig::load`] and
/// [`CharacterRig::checked`] reject rigs with error-level diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterRig {
    pub name: String,
    pub vertex_count: usize,
    pub base_vertices: Vec<f64>,
    #[serde(default)]
    pub faces: Vec<[u32; 3]>,
    pub blendshapes: Vec<Blendshape>,
    pub landmark_map: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn error(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            field: field.into(),
            message: message.into(),
        }
    }
}

pub const UNOBSERVABLE_WARNING: &str = "unobservable channel: adapter cannot learn it";

/// Structural checks plus a warning for every blendshape that does not move
/// any landmark vertex.
pub fn validate_rig(rig: &CharacterRig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let w = rig.vertex_count;
    if w == 0 {
        out.push(Diagnostic::error(
            "vertex_count",
            "vertex count must be positive",
        ));
    }
    if rig.base_vertices.len() != 3 * w {
        out.push(Diagnostic::error(
            "base_vertices",
            format!("expected {} values, got {}", 3 * w, rig.base_vertices.len()),
        ));
    }
    if rig.base_vertices.iter().any(|v| !v.is_finite()) {
        out.push(Diagnostic::error("base_vertices", "non-finite coordinate"));
    }
    if let Some((i, f)) = rig
        .faces
        .iter()
        .enumerate()
        .find(|(_, f)| f.iter().any(|&v| v as usize >= w))
    {
        out.push(Diagnostic::error(
            format!("faces[{i}]"),
            format!("vertex index in {f:?} out of range (vertex_count {w})"),
        ));
    }
    if rig.blendshapes.is_empty() {
        out.push(Diagnostic::error(
            "blendshapes",
            "rig needs at least one blendshape",
        ));
    }

    if rig.landmark_map.len() != NUM_LANDMARKS {
        out.push(Diagnostic::error(
            "landmark_map",
            format!(
                "expected {NUM_LANDMARKS} indices, got {}",
                rig.landmark_map.len()
            ),
        ));
    }
    let mut seen = HashSet::new();
    let mut map_ok = true;
    for (n, &v) in rig.landmark_map.iter().enumerate() {
        if v >= w {
            map_ok = false;
            out.push(Diagnostic::error(
                format!("landmark_map[{n}]"),
                format!("vertex index {v} out of range (vertex_count {w})"),
            ));
        } else if !seen.insert(v) {
            out.push(Diagnostic::error(
                format!("landmark_map[{n}]"),
                format!("vertex index {v} listed twice"),
            ));
        }
    }

    let mut names = HashSet::new();
    let mut landmark_norms = Vec::with_capacity(rig.blendshapes.len());
    for (k, b) in rig.blendshapes.iter().enumerate() {
        if !names.insert(b.name.as_str()) {
            out.push(Diagnostic::error(
                format!("blendshapes[{k}].name"),
                format!("duplicate blendshape name {:?}", b.name),
            ));
        }
        if b.delta.len() != 3 * w {
            out.push(Diagnostic::error(
                format!("blendshapes[{k}].delta"),
                format!("expected {} values, got {}", 3 * w, b.delta.len()),
            ));
            landmark_norms.push(None);
            continue;
        }
        if b.delta.iter().any(|v| !v.is_finite()) {
            out.push(Diagnostic::error(
                format!("blendshapes[{k}].delta"),
                "non-finite value",
            ));
        }
        landmark_norms.push(map_ok.then(|| landmark_delta_norm(&b.delta, &rig.landmark_map)));
    }
    for (k, norm) in landmark_norms.iter().enumerate() {
        if *norm == Some(0.0) {
            out.push(Diagnostic {
                severity: Severity::Warning,
                field: format!("blendshapes[{k}]"),
                message: format!("{UNOBSERVABLE_WARNING} ({:?})", rig.blendshapes[k].name),
            });
        }
    }
    out
}

fn landmark_delta_norm(delta: &[f64], landmark_map: &[usize]) -> f64 {
    landmark_map
        .iter()
        .flat_map(|&v| &delta[3 * v..3 * v + 3])
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl CharacterRig {
    pub fn k(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.blendshapes.iter().map(|b| b.name.clone()).collect()
    }

    /// Returns the rig if it has no error-level diagnostics.
    pub fn checked(self) -> Result<Self> {
        let errors: Vec<String> = validate_rig(&self)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| format!("{}: {}", d.field, d.message))
            .collect();
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Invalid(format!(
                "rig {:?}: {}",
                self.name,
                errors.join("; ")
            )))
        }
    }

    pub fn apply_blendweights(&self, alpha: &BlendWeights) -> Result<VertexPositions> {
        check_len("blend weights", self.k(), alpha.len())?;
        let mut out = self.base_vertices.clone();
        for (b, &a) in self.blendshapes.iter().zip(alpha.as_slice()) {
            check_len("blendshape delta", out.len(), b.delta.len())?;
            if a != 0.0 {
                for (o, d) in out.iter_mut().zip(&b.delta) {
                    *o += a * d;
                }
            }
        }
        Ok(VertexPositions(out))
    }

    pub fn rig_landmarks(&self, alpha: &BlendWeights) -> Result<LandmarkSet3D> {
        self.apply_blendweights(alpha)?.gather(&self.landmark_map)
    }

    /// Landmark-vertex displacement norm of every channel.
    pub fn landmark_delta_norms(&self) -> Vec<f64> {
        self.blendshapes
            .iter()
            .map(|b| landmark_delta_norm(&b.delta, &self.landmark_map))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rig: Self = io::read_json(path.as_ref())?;
        rig.checked().map_err(|e| Error::File {
            path: path.as_ref().to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }
}

pub const DEFAULT_MIX_SPARSITY: f64 = 0.25;
/// Landmark RMS displacement of each synthetic channel, relative to the
/// neutral landmark width.
const CHANNEL_MAGNITUDE: f64 = 0.03;

/// Builds a rig on the model mesh whose deltas are `B_exp · m_k` for sparse
/// random mixing vectors `m_k`, each scaled to the same landmark RMS motion.
pub fn generate_synthetic_rig(
    model: &MorphableModel,
    k: usize,
    seed: u64,
    mix_sparsity: f64,
) -> Result<CharacterRig> {
    if k == 0 {
        return Err(Error::InvalidSize(
            "a rig needs at least one blendshape".into(),
        ));
    }
    if !(mix_sparsity > 0.0 && mix_sparsity <= 1.0) {
        return Err(Error::Invalid(format!(
            "mix_sparsity {mix_sparsity} must be in (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nnz = ((mix_sparsity * EXPR_DIM as f64).round() as usize).clamp(1, EXPR_DIM);

    let landmarks = model.landmark_indices();
    let mean = model.mean_shape();
    let xs = landmarks.iter().map(|&v| mean[3 * v]);
    let width = xs.clone().fold(f64::NEG_INFINITY, f64::max) - xs.fold(f64::INFINITY, f64::min);
    let target_rms = CHANNEL_MAGNITUDE * width;

    let mut blendshapes = Vec::with_capacity(k);
    for c in 0..k {
        let mut m = DVector::zeros(EXPR_DIM);
        for j in index::sample(&mut rng, EXPR_DIM, nnz) {
            m[j] = StandardNormal.sample(&mut rng);
        }
        let delta = model.expr_basis() * &m;
        let rms = landmark_delta_norm(delta.as_slice(), landmarks) / (NUM_LANDMARKS as f64).sqrt();
        let delta = if rms > 0.0 {
            delta * (target_rms / rms)
        } else {
            delta
        };
        blendshapes.push(Blendshape {
            name: format!("bs_{c:03}"),
            delta: delta.as_slice().to_vec(),
        });
    }

    Ok(CharacterRig {
        name: format!("synthetic_k{k}_s{seed}"),
        vertex_count: model.vertex_count(),
        base_vertices: mean.as_slice().to_vec(),
        faces: grid_faces(model.vertex_count()),
        blendshapes,
        landmark_map: landmarks.to_vec(),
    })
}

/// Coordinates of every delta in the expression basis (`64 × K`). For a
/// synthetic rig this is the mixing matrix M with `γ = M·α`.
pub fn expression_mixing(model: &MorphableModel, rig: &CharacterRig) -> Result<DMatrix<f64>> {
    check_len("rig vertex count", model.vertex_count(), rig.vertex_count)?;
    let deltas = DMatrix::from_fn(3 * rig.vertex_count, rig.k(), |r, c| {
        rig.blendshapes[c].delta[r]
    });
    Ok(model.expr_basis().tr_mul(&deltas))
}

/// Largest norm of a delta's component outside the expression-basis span.
pub fn span_residual(model: &MorphableModel, rig: &CharacterRig) -> Result<f64> {
    let m = expression_mixing(model, rig)?;
    let projected = model.expr_basis() * &m;
    Ok((0..rig.k())
        .map(|c| {
            let d = DVector::from_column_slice(&rig.blendshapes[c].delta);
            (d - projected.column(c)).norm()
        })
        .fold(0.0, f64::max))
}
