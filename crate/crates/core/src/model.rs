//! Linear morphable face model: `S = mean + B_id·β + B_exp·γ`.
//!
//! Vertex coordinates are stored x,y,z interleaved in one flat vector of
//! length `3V`, so shape synthesis is a pair of dense matrix-vector products.
//! The synthetic generator stands in for licensed scan-based models; it keeps
//! the same dimensional interface (`3V`, identity width, 64 expressions).

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::io;

/// Width of the expression basis and of the adapter input.
pub const EXPR_DIM: usize = 64;
/// Landmarks per face in the 68-point convention.
pub const NUM_LANDMARKS: usize = 68;
pub const DEFAULT_ID_DIM: usize = 80;
pub const DEFAULT_VERTEX_COUNT: usize = 800;

/// Identity coefficients β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityParams(pub Vec<f64>);

impl IdentityParams {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

/// Expression coefficients γ, always [`EXPR_DIM`] long.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ExpressionParams(Vec<f64>);

impl ExpressionParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_len("expression parameters", EXPR_DIM, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite expression parameter".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EXPR_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for ExpressionParams {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ExpressionParams> for Vec<f64> {
    fn from(p: ExpressionParams) -> Self {
        p.0
    }
}

/// Flat `3V` vertex buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexPositions(pub Vec<f64>);

impl VertexPositions {
    pub fn vertex_count(&self) -> usize {
        self.0.len() / 3
    }

    pub fn vertex(&self, index: usize) -> Vector3<f64> {
        Vector3::new(
            self.0[3 * index],
            self.0[3 * index + 1],
            self.0[3 * index + 2],
        )
    }

    /// Gathers the given vertices in list order.
    pub fn gather(&self, indices: &[usize]) -> Result<LandmarkSet3D> {
        let count = self.vertex_count();
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= count {
                return Err(Error::IndexOutOfRange {
                    what: "landmark vertex",
                    index: i,
                    len: count,
                });
            }
            points.push(self.vertex(i));
        }
        LandmarkSet3D::new(points)
    }
}

/// Exactly 68 finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet3D(Vec<Vector3<f64>>);

impl LandmarkSet3D {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        check_len("3D landmark set", NUM_LANDMARKS, points.len())?;
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("non-finite 3D landmark".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.0
    }
}

/// Exactly 68 finite image-plane points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct LandmarkSet2D(Vec<Vector2<f64>>);

impl LandmarkSet2D {
    pub fn new(points: Vec<Vector2<f64>>) -> Result<Self> {
        check_len("2D landmark set", NUM_LANDMARKS, points.len())?;
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Invalid("non-finite 2D landmark".into()));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.0
    }

    pub fn centroid(&self) -> Vector2<f64> {
        self.0.iter().sum::<Vector2<f64>>() / self.0.len() as f64
    }

    /// Horizontal extent of the point set.
    pub fn width(&self) -> f64 {
        let (lo, hi) = self
            .0
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.x), hi.max(p.x))
            });
        hi - lo
    }

    pub fn map(&self, f: impl FnMut(&Vector2<f64>) -> Vector2<f64>) -> Self {
        Self(self.0.iter().map(f).collect())
    }
}

impl TryFrom<Vec<[f64; 2]>> for LandmarkSet2D {
    type Error = Error;
    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(
            points
                .into_iter()
                .map(|[x, y]| Vector2::new(x, y))
                .collect(),
        )
    }
}

impl From<LandmarkSet2D> for Vec<[f64; 2]> {
    fn from(set: LandmarkSet2D) -> Self {
        set.0.into_iter().map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    id_basis: DMatrix<f64>,
    expr_basis: DMatrix<f64>,
    landmark_indices: Vec<usize>,
    vertex_count: usize,
}

impl MorphableModel {
    pub fn new(
        mean_shape: DVector<f64>,
        id_basis: DMatrix<f64>,
        expr_basis: DMatrix<f64>,
        landmark_indices: Vec<usize>,
    ) -> Result<Self> {
        let rows = mean_shape.len();
        if rows == 0 || !rows.is_multiple_of(3) {
            return Err(Error::InvalidSize(format!(
                "mean shape length {rows} is not a positive multiple of 3"
            )));
        }
        let vertex_count = rows / 3;
        check_len("identity basis rows", rows, id_basis.nrows())?;
        check_len("expression basis rows", rows, expr_basis.nrows())?;
        check_len("expression basis columns", EXPR_DIM, expr_basis.ncols())?;
        check_len("landmark indices", NUM_LANDMARKS, landmark_indices.len())?;
        let mut seen = vec![false; vertex_count];
        for &i in &landmark_indices {
            if i >= vertex_count {
                return Err(Error::IndexOutOfRange {
                    what: "landmark vertex",
                    index: i,
                    len: vertex_count,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invalid(format!("landmark vertex {i} listed twice")));
            }
        }
        Ok(Self {
            mean_shape,
            id_basis,
            expr_basis,
            landmark_indices,
            vertex_count,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn id_dim(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn id_basis(&self) -> &DMatrix<f64> {
        &self.id_basis
    }

    pub fn expr_basis(&self) -> &DMatrix<f64> {
        &self.expr_basis
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn synthesize_shape(
        &self,
        beta: &IdentityParams,
        gamma: &ExpressionParams,
    ) -> Result<VertexPositions> {
        synthesize(
            &self.mean_shape,
            &self.id_basis,
            &self.expr_basis,
            beta,
            gamma,
        )
    }

    pub fn select_landmarks(&self, vertices: &VertexPositions) -> Result<LandmarkSet3D> {
        check_len("vertex buffer", 3 * self.vertex_count, vertices.0.len())?;
        vertices.gather(&self.landmark_indices)
    }

    /// Landmark positions of `mean + B_id·β` and the matching `204 × 64`
    /// block of the expression basis (three rows per landmark).
    pub fn landmark_system(
        &self,
        beta: &IdentityParams,
    ) -> Result<(Vec<Vector3<f64>>, DMatrix<f64>)> {
        check_len("identity parameters", self.id_dim(), beta.0.len())?;
        let mut base = Vec::with_capacity(NUM_LANDMARKS);
        let mut rows = DMatrix::zeros(3 * NUM_LANDMARKS, EXPR_DIM);
        for (n, &v) in self.landmark_indices.iter().enumerate() {
            let mut p = Vector3::zeros();
            for a in 0..3 {
                let r = 3 * v + a;
                p[a] = self.mean_shape[r]
                    + self
                        .id_basis
                        .row(r)
                        .transpose()
                        .dot(&DVector::from_column_slice(&beta.0));
                rows.row_mut(3 * n + a).copy_from(&self.expr_basis.row(r));
            }
            base.push(p);
        }
        Ok((base, rows))
    }

    /// Largest deviation of `BᵀB` from identity over both bases.
    pub fn orthonormality_error(&self) -> f64 {
        gram_error(&self.id_basis).max(gram_error(&self.expr_basis))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: ModelFile = io::read_json(path.as_ref())?;
        file.try_into().map_err(|e| Error::File {
            path: path.as_ref().to_path_buf(),
            source: Box::new(e),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, &ModelFile::from(self))
    }
}

fn gram_error(basis: &DMatrix<f64>) -> f64 {
    let gram = basis.tr_mul(basis);
    let n = gram.nrows();
    (gram - DMatrix::identity(n, n)).amax()
}

/// `mean + id_basis·β + expr_basis·γ` on raw basis matrices.
pub fn synthesize(
    mean_shape: &DVector<f64>,
    id_basis: &DMatrix<f64>,
    expr_basis: &DMatrix<f64>,
    beta: &IdentityParams,
    gamma: &ExpressionParams,
) -> Result<VertexPositions> {
    let rows = mean_shape.len();
    check_len("identity basis rows", rows, id_basis.nrows())?;
    check_len("expression basis rows", rows, expr_basis.nrows())?;
    check_len("expression basis columns", EXPR_DIM, expr_basis.ncols())?;
    check_len("identity parameters", id_basis.ncols(), beta.0.len())?;
    let mut shape = mean_shape.clone();
    shape.gemv(1.0, id_basis, &DVector::from_column_slice(&beta.0), 1.0);
    shape.gemv(
        1.0,
        expr_basis,
        &DVector::from_column_slice(gamma.as_slice()),
        1.0,
    );
    Ok(VertexPositions(shape.data.into()))
}

/// On-disk layout: bases are flattened row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub vertex_count: usize,
    pub id_dim: usize,
    pub expr_dim: usize,
    pub mean_shape: Vec<f64>,
    pub id_basis: Vec<f64>,
    pub expr_basis: Vec<f64>,
    pub landmark_indices: Vec<usize>,
}

impl From<&MorphableModel> for ModelFile {
    fn from(m: &MorphableModel) -> Self {
        Self {
            vertex_count: m.vertex_count,
            id_dim: m.id_dim(),
            expr_dim: EXPR_DIM,
            mean_shape: m.mean_shape.as_slice().to_vec(),
            id_basis: row_major(&m.id_basis),
            expr_basis: row_major(&m.expr_basis),
            landmark_indices: m.landmark_indices.clone(),
        }
    }
}

impl TryFrom<ModelFile> for MorphableModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let rows = 3 * f.vertex_count;
        check_len("mean_shape", rows, f.mean_shape.len())?;
        check_len("expr_dim", EXPR_DIM, f.expr_dim)?;
        check_len("id_basis entries", rows * f.id_dim, f.id_basis.len())?;
        check_len("expr_basis entries", rows * f.expr_dim, f.expr_basis.len())?;
        MorphableModel::new(
            DVector::from_vec(f.mean_shape),
            DMatrix::from_row_slice(rows, f.id_dim, &f.id_basis),
            DMatrix::from_row_slice(rows, f.expr_dim, &f.expr_basis),
            f.landmark_indices,
        )
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

// ---------------------------------------------------------------------------
// Synthetic model
// ---------------------------------------------------------------------------

/// Expression motion is mostly tangential to the face.
const EXPR_DEPTH_WEIGHT: f64 = 0.35;

/// Semi-axes of the head ellipsoid, in metres.
const HEAD_AXES: [f64; 3] = [0.075, 0.10, 0.07];

/// Rows and columns of the surface grid that precedes the landmark vertices.
pub fn grid_dims(vertex_count: usize) -> (usize, usize) {
    let n = vertex_count.saturating_sub(NUM_LANDMARKS);
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

/// Triangles over the surface grid of a synthetic model with `vertex_count`
/// vertices. Landmark vertices are not part of the surface.
pub fn grid_faces(vertex_count: usize) -> Vec<[u32; 3]> {
    let n = vertex_count.saturating_sub(NUM_LANDMARKS);
    let (rows, cols) = grid_dims(vertex_count);
    let mut faces = Vec::new();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            let a = r * cols + c;
            let (b, d, e) = (a + 1, a + cols, a + cols + 1);
            if e < n {
                faces.push([a as u32, d as u32, b as u32]);
                faces.push([b as u32, d as u32, e as u32]);
            } else if d < n && b < n {
                faces.push([a as u32, d as u32, b as u32]);
            }
        }
    }
    faces
}

/// 68-point layout in normalised face coordinates (x right, y up, half-width 1).
pub fn landmark_template() -> Vec<Vector2<f64>> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    // jaw line, ear to ear through the chin
    for i in 0..17 {
        let a = (170.0 + 200.0 * i as f64 / 16.0) * PI / 180.0;
        pts.push(Vector2::new(0.9 * a.cos(), 0.15 + 1.05 * a.sin()));
    }
    // brows
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = if side < 0.0 {
                -0.75 + 0.6 * t
            } else {
                0.15 + 0.6 * t
            };
            pts.push(Vector2::new(x, 0.55 + 0.08 * (PI * t).sin()));
        }
    }
    // nose bridge and base
    for i in 0..4 {
        pts.push(Vector2::new(0.0, 0.4 - 0.35 * i as f64 / 3.0 * 1.0));
    }
    for i in 0..5 {
        let x = -0.2 + 0.1 * i as f64;
        pts.push(Vector2::new(x, -0.05 - 0.04 * (1.0 - x.abs() / 0.2)));
    }
    // eyes
    for cx in [-0.42, 0.42] {
        for deg in [180.0, 135.0, 45.0, 0.0, -45.0, -135.0] {
            let a: f64 = deg * PI / 180.0;
            pts.push(Vector2::new(cx + 0.15 * a.cos(), 0.38 + 0.06 * a.sin()));
        }
    }
    // outer and inner lips
    for i in 0..12 {
        let a = (180.0 - 30.0 * i as f64) * PI / 180.0;
        pts.push(Vector2::new(0.35 * a.cos(), -0.45 + 0.15 * a.sin()));
    }
    for i in 0..8 {
        let a = (180.0 - 45.0 * i as f64) * PI / 180.0;
        pts.push(Vector2::new(0.22 * a.cos(), -0.45 + 0.06 * a.sin()));
    }
    pts
}

fn nose_height(x: f64, y: f64) -> f64 {
    0.022 * (-(x * x + (y - 0.005).powi(2)) / (2.0 * 0.013f64.powi(2))).exp()
}

fn ellipsoid_point(u: f64, v: f64) -> Vector3<f64> {
    // u, v in [-1, 1]: longitude ±70°, latitude ±60°
    let theta = u * 70f64.to_radians();
    let phi = v * 60f64.to_radians();
    let [a, b, c] = HEAD_AXES;
    let (x, y) = (a * theta.sin() * phi.cos(), b * phi.sin());
    Vector3::new(x, y, c * theta.cos() * phi.cos() + nose_height(x, y))
}

fn face_point(p: &Vector2<f64>) -> Vector3<f64> {
    let [a, b, c] = HEAD_AXES;
    let (x, y) = (0.85 * a * p.x, 0.8 * b * p.y);
    let r2 = (x / a).powi(2) + (y / b).powi(2);
    Vector3::new(x, y, c * (1.0 - r2).max(0.0).sqrt() + nose_height(x, y))
}

/// Smooth random displacement field built from a handful of Gaussian bumps.
fn bump_field(
    rng: &mut ChaCha8Rng,
    positions: &[Vector3<f64>],
    centers: &[Vector3<f64>],
    radius: (f64, f64),
    depth_weight: f64,
) -> DVector<f64> {
    let mut field: DVector<f64> = DVector::zeros(3 * positions.len());
    for _ in 0..5 {
        let center = centers[rng.random_range(0..centers.len())];
        let sigma = rng.random_range(radius.0..radius.1);
        let mut dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        dir.z *= depth_weight;
        for (v, p) in positions.iter().enumerate() {
            let w = (-(p - center).norm_squared() / (2.0 * sigma * sigma)).exp();
            for a in 0..3 {
                field[3 * v + a] += w * dir[a];
            }
        }
    }
    // small incoherent part keeps the columns independent on tiny meshes
    let rms = (field.norm_squared() / field.len() as f64).sqrt().max(1e-3);
    for x in field.iter_mut() {
        *x += 0.05 * rms * rng.sample::<f64, _>(StandardNormal);
    }
    field
}

/// Two-pass modified Gram-Schmidt against `basis` (columns assumed orthonormal).
fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let d = q.dot(v);
            v.axpy(-d, q, 1.0);
        }
    }
}

fn orthonormal_columns(
    rng: &mut ChaCha8Rng,
    count: usize,
    constraints: &[DVector<f64>],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> DVector<f64>,
) -> Vec<DVector<f64>> {
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(count);
    while cols.len() < count {
        let mut v = draw(rng);
        let before = v.norm();
        orthogonalize(&mut v, constraints);
        orthogonalize(&mut v, &cols);
        let after = v.norm();
        if after > 1e-6 * before && after > 0.0 {
            cols.push(v / after);
        }
    }
    cols
}

/// Builds a seeded synthetic morphable model.
///
/// The surface is a grid over the front of a head-sized ellipsoid with a
/// nose; the last 68 vertices are dedicated landmark vertices laid out in the
/// usual 68-point arrangement. Both bases are smooth random fields
/// orthonormalised by Gram-Schmidt. Expression columns are additionally made
/// orthogonal to every affine motion of the neutral landmark configuration
/// (translation plus the nine linear moments), the analogue of building an
/// expression basis from rigidly aligned scans: expressions never masquerade
/// as head pose.
pub fn generate_synthetic_model(
    seed: u64,
    vertex_count: usize,
    id_dim: usize,
) -> Result<MorphableModel> {
    if vertex_count < NUM_LANDMARKS {
        return Err(Error::InvalidSize(format!(
            "vertex count {vertex_count} is below the {NUM_LANDMARKS} landmarks"
        )));
    }
    if id_dim == 0 || id_dim > 3 * vertex_count {
        return Err(Error::InvalidSize(format!(
            "identity dimension {id_dim} must be in 1..={}",
            3 * vertex_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let grid_n = vertex_count - NUM_LANDMARKS;
    let (rows, cols) = grid_dims(vertex_count);
    let mut positions = Vec::with_capacity(vertex_count);
    for i in 0..grid_n {
        let (r, c) = (i / cols, i % cols);
        let u = if cols > 1 {
            -1.0 + 2.0 * c as f64 / (cols - 1) as f64
        } else {
            0.0
        };
        let v = if rows > 1 {
            1.0 - 2.0 * r as f64 / (rows - 1) as f64
        } else {
            0.0
        };
        positions.push(ellipsoid_point(u, v));
    }
    positions.extend(landmark_template().iter().map(face_point));

    // seeded low-amplitude variation of the neutral face
    let wobble = bump_field(&mut rng, &positions, &positions, (0.03, 0.06), 1.0);
    let wobble_scale = 0.002 / (wobble.norm_squared() / wobble.len() as f64).sqrt();
    let mut mean_shape = DVector::zeros(3 * vertex_count);
    for (v, p) in positions.iter().enumerate() {
        for a in 0..3 {
            mean_shape[3 * v + a] = p[a] + wobble_scale * wobble[3 * v + a];
        }
    }
    let landmark_indices: Vec<usize> = (grid_n..vertex_count).collect();

    let lm: Vec<Vector3<f64>> = landmark_indices
        .iter()
        .map(|&v| {
            Vector3::new(
                mean_shape[3 * v],
                mean_shape[3 * v + 1],
                mean_shape[3 * v + 2],
            )
        })
        .collect();
    let centroid = lm.iter().sum::<Vector3<f64>>() / lm.len() as f64;

    // affine motions of the landmark configuration: 3 translations + 9 moments
    let mut raw = Vec::with_capacity(12);
    for axis in 0..3 {
        for f in 0..4 {
            let mut c = DVector::zeros(3 * vertex_count);
            for (n, &v) in landmark_indices.iter().enumerate() {
                c[3 * v + axis] = if f == 0 {
                    1.0
                } else {
                    lm[n][f - 1] - centroid[f - 1]
                };
            }
            raw.push(c);
        }
    }
    let mut affine: Vec<DVector<f64>> = Vec::with_capacity(12);
    for mut c in raw {
        orthogonalize(&mut c, &affine);
        let n = c.norm();
        affine.push(c / n);
    }

    let id_cols = orthonormal_columns(&mut rng, id_dim, &[], |rng| {
        bump_field(rng, &positions, &positions, (0.02, 0.05), 1.0)
    });
    let landmark_positions = &positions[grid_n..];
    let expr_cols = orthonormal_columns(&mut rng, EXPR_DIM, &affine, |rng| {
        if rng.random_bool(0.75) {
            bump_field(
                rng,
                &positions,
                landmark_positions,
                (0.008, 0.02),
                EXPR_DEPTH_WEIGHT,
            )
        } else {
            bump_field(rng, &positions, &positions, (0.01, 0.03), EXPR_DEPTH_WEIGHT)
        }
    });

    MorphableModel::new(
        mean_shape,
        DMatrix::from_columns(&id_cols),
        DMatrix::from_columns(&expr_cols),
        landmark_indices,
    )
}
