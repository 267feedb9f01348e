//! Landmark fitting: weak-perspective pose plus expression coefficients by
//! alternating least squares.

use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{
    ExpressionParams, IdentityParams, LandmarkSet2D, LandmarkSet3D, MorphableModel, EXPR_DIM,
    NUM_LANDMARKS,
};

/// Scaled orthographic camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseFile", into = "PoseFile")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector2<f64>,
    scale: f64,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector2<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Invalid(format!(
                "pose scale {scale} must be positive"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite pose translation".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(ortho <= 1e-8) || (rotation.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::Invalid(
                "pose rotation is not a proper rotation".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector2::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_axis_angle(
        axis_angle: Vector3<f64>,
        translation: Vector2<f64>,
        scale: f64,
    ) -> Result<Self> {
        Self::new(*Rotation3::new(axis_angle).matrix(), translation, scale)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Rotation vector. Uses atan2 so rounding that pushes the trace past 3
    /// still yields a finite result.
    pub fn axis_angle(&self) -> Vector3<f64> {
        let r = &self.rotation;
        let v = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        let sin = 0.5 * v.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        let angle = sin.atan2(cos);
        if sin > 1e-7 {
            v * (angle / (2.0 * sin))
        } else if cos > 0.0 {
            0.5 * v
        } else {
            // half-turn: the axis is the dominant column of R + I
            let b = r + Matrix3::identity();
            let j = (0..3)
                .max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)]))
                .unwrap_or(0);
            b.column(j).normalize() * angle
        }
    }

    /// The 2×3 camera matrix `scale · R[0..2, :]`.
    pub fn camera(&self) -> Matrix2x3<f64> {
        self.scale * self.rotation.fixed_rows::<2>(0).into_owned()
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        self.camera() * p + self.translation
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        let sin = 0.5
            * Vector3::new(
                r[(2, 1)] - r[(1, 2)],
                r[(0, 2)] - r[(2, 0)],
                r[(1, 0)] - r[(0, 1)],
            )
            .norm();
        let cos = 0.5 * (r.trace() - 1.0);
        sin.atan2(cos)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    rotation: [f64; 9],
    translation: [f64; 2],
    scale: f64,
}

impl From<Pose> for PoseFile {
    fn from(p: Pose) -> Self {
        let r = p.rotation.transpose();
        Self {
            rotation: r.as_slice().try_into().unwrap(),
            translation: [p.translation.x, p.translation.y],
            scale: p.scale,
        }
    }
}

impl TryFrom<PoseFile> for Pose {
    type Error = Error;
    fn try_from(f: PoseFile) -> Result<Self> {
        Pose::new(
            Matrix3::from_row_slice(&f.rotation),
            Vector2::new(f.translation[0], f.translation[1]),
            f.scale,
        )
    }
}

/// Tikhonov weight on γ. The relative form multiplies by the squared
/// horizontal extent of the observed landmarks, which keeps the fit
/// invariant to the units of the landmark coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Relative(f64),
    Absolute(f64),
}

impl Regularization {
    pub fn resolve(&self, observed: &LandmarkSet2D) -> f64 {
        match *self {
            Regularization::Relative(k) => k * observed.width().powi(2),
            Regularization::Absolute(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub reg_lambda: Regularization,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-8,
            reg_lambda: Regularization::Relative(1e-4),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Invalid("tol must be positive".into()));
        }
        let (Regularization::Relative(v) | Regularization::Absolute(v)) = self.reg_lambda;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Invalid("reg_lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub gamma: ExpressionParams,
    pub pose: Pose,
    /// Mean landmark distance of the returned solution.
    pub residual: f64,
    pub iterations: usize,
    /// Residual after each accepted iteration.
    pub history: Vec<f64>,
}

pub fn project_weak_perspective(points: &LandmarkSet3D, pose: &Pose) -> LandmarkSet2D {
    let cam = pose.camera();
    let projected = points
        .points()
        .iter()
        .map(|p| cam * p + pose.translation)
        .collect();
    LandmarkSet2D::new(projected).expect("projection of finite points under a valid pose")
}

/// Mean Euclidean distance between corresponding landmarks.
pub fn landmark_loss(predicted: &LandmarkSet2D, observed: &LandmarkSet2D) -> f64 {
    let (p, q) = (predicted.points(), observed.points());
    p.iter().zip(q).map(|(a, b)| (a - b).norm()).sum::<f64>() / p.len() as f64
}

fn procrustes_pose(src: &[Vector3<f64>], dst: &[Vector2<f64>]) -> Result<Pose> {
    let n = src.len() as f64;
    let xc = src.iter().sum::<Vector3<f64>>() / n;
    let yc = dst.iter().sum::<Vector2<f64>>() / n;
    let mut sxx = Matrix3::zeros();
    let mut syx = Matrix2x3::zeros();
    for (x, y) in src.iter().zip(dst) {
        let (dx, dy) = (x - xc, y - yc);
        sxx += dx * dx.transpose();
        syx += dy * dx.transpose();
    }

    // least-squares 2×3 map through a pseudo-inverse, so planar sets work
    let eig = sxx.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let rank = eig.eigenvalues.iter().filter(|&&v| v > 1e-12 * top).count();
    if !(top > 0.0) || rank < 2 {
        return Err(Error::DegenerateGeometry(format!(
            "3D landmark configuration has rank {rank}; need at least 2"
        )));
    }
    let mut inv = Matrix3::zeros();
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        if v > 1e-12 * top {
            let u = eig.eigenvectors.column(k);
            inv += u * u.transpose() / v;
        }
    }
    let affine = syx * inv;

    let svd = affine.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if svd.singular_values.min() <= 1e-12 * svd.singular_values.max() {
        return Err(Error::DegenerateGeometry(
            "observed landmarks do not span the image plane".into(),
        ));
    }
    let r2 = u * v_t;
    let r0 = r2.row(0).transpose();
    let r1 = r2.row(1).transpose();
    let rotation = Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r0.cross(&r1).transpose()]);

    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in src.iter().zip(dst) {
        let rx = r2 * (x - xc);
        num += (y - yc).dot(&rx);
        den += rx.norm_squared();
    }
    if !(num > 0.0) {
        return Err(Error::DegenerateGeometry(
            "non-positive similarity scale".into(),
        ));
    }
    let scale = num / den;
    let translation = yc - scale * r2 * xc;
    Pose::new(rotation, translation, scale)
}

fn squared_cost(src: &[Vector3<f64>], dst: &[Vector2<f64>], pose: &Pose) -> f64 {
    let cam = pose.camera();
    src.iter()
        .zip(dst)
        .map(|(x, y)| (cam * x + pose.translation - y).norm_squared())
        .sum()
}

/// Levenberg-Marquardt on rotation increment, log-scale and translation,
/// accepting only steps that lower the squared reprojection error.
fn refine_pose(src: &[Vector3<f64>], dst: &[Vector2<f64>], mut pose: Pose) -> Pose {
    let mut cost = squared_cost(src, dst, &pose);
    let mut mu = 1e-9;
    for _ in 0..30 {
        if cost == 0.0 {
            break;
        }
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let s = pose.scale;
        for (x, y) in src.iter().zip(dst) {
            let p = pose.rotation * x;
            let r = s * Vector2::new(p.x, p.y) + pose.translation - y;
            let jx = Vector6::new(0.0, s * p.z, -s * p.y, s * p.x, 1.0, 0.0);
            let jy = Vector6::new(-s * p.z, 0.0, s * p.x, s * p.y, 0.0, 1.0);
            jtj += jx * jx.transpose() + jy * jy.transpose();
            jtr += jx * r.x + jy * r.y;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += mu * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let rot = Rotation3::new(Vector3::new(step[0], step[1], step[2]));
            let candidate = Pose {
                rotation: orthonormalize(rot.matrix() * pose.rotation),
                translation: pose.translation + Vector2::new(step[4], step[5]),
                scale: pose.scale * step[3].exp(),
            };
            let c = squared_cost(src, dst, &candidate);
            if c < cost {
                let gain = (cost - c) / cost;
                pose = candidate;
                cost = c;
                mu = (mu * 0.1).max(1e-12);
                improved = gain > 1e-14;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Weak-perspective similarity aligning 3D landmarks to 2D observations.
///
/// Initialised by the least-squares affine camera projected onto a scaled
/// rotation, then polished on the true reprojection error.
pub fn fit_pose(model_landmarks: &LandmarkSet3D, observed: &LandmarkSet2D) -> Result<Pose> {
    let (src, dst) = (model_landmarks.points(), observed.points());
    let init = procrustes_pose(src, dst)?;
    Ok(refine_pose(src, dst, init))
}

/// Landmark rows of the model for a fixed identity, cached across fits.
#[derive(Clone, Debug)]
pub struct LandmarkBasis {
    base: Vec<Vector3<f64>>,
    rows: DMatrix<f64>,
}

impl LandmarkBasis {
    pub fn new(model: &MorphableModel, beta: &IdentityParams) -> Result<Self> {
        let (base, rows) = model.landmark_system(beta)?;
        Ok(Self { base, rows })
    }

    pub fn landmarks(&self, gamma: &ExpressionParams) -> Vec<Vector3<f64>> {
        let offsets = &self.rows * DVector::from_column_slice(gamma.as_slice());
        self.base
            .iter()
            .enumerate()
            .map(|(n, b)| b + Vector3::new(offsets[3 * n], offsets[3 * n + 1], offsets[3 * n + 2]))
            .collect()
    }

    pub fn fit_expression(
        &self,
        pose: &Pose,
        observed: &LandmarkSet2D,
        reg_lambda: f64,
    ) -> Result<ExpressionParams> {
        if !(reg_lambda >= 0.0 && reg_lambda.is_finite()) {
            return Err(Error::Invalid(format!(
                "reg_lambda {reg_lambda} must be nonnegative"
            )));
        }
        let cam = pose.camera();
        let mut a = DMatrix::zeros(2 * NUM_LANDMARKS, EXPR_DIM);
        let mut r = DVector::zeros(2 * NUM_LANDMARKS);
        for (n, (b, q)) in self.base.iter().zip(observed.points()).enumerate() {
            let block = self.rows.fixed_rows::<3>(3 * n);
            a.fixed_rows_mut::<2>(2 * n).copy_from(&(cam * block));
            let target = q - (cam * b + pose.translation);
            r[2 * n] = target.x;
            r[2 * n + 1] = target.y;
        }
        let mut normal = a.tr_mul(&a);
        let rhs = a.tr_mul(&r);
        let diag_max = normal.diagonal().amax();
        for k in 0..EXPR_DIM {
            normal[(k, k)] += reg_lambda;
        }
        let chol = normal.cholesky().ok_or(Error::IllConditioned)?;
        let l_diag = chol.l_dirty().diagonal();
        let pivot_min = l_diag.iter().fold(f64::INFINITY, |m, &v| m.min(v * v));
        if !(pivot_min > 1e-13 * diag_max.max(reg_lambda)) {
            return Err(Error::IllConditioned);
        }
        let gamma = chol.solve(&rhs);
        ExpressionParams::new(gamma.as_slice().to_vec())
    }

    fn set(&self, gamma: &ExpressionParams) -> LandmarkSet3D {
        LandmarkSet3D::new(self.landmarks(gamma)).expect("finite landmarks")
    }

    pub fn fit(&self, observed: &LandmarkSet2D, config: &FitConfig) -> Result<FitResult> {
        config.validate()?;
        let lambda = config.reg_lambda.resolve(observed);
        let floor = 1e-13 * observed.width().max(f64::MIN_POSITIVE);

        let mut gamma = ExpressionParams::zeros();
        let mut pose = fit_pose(&self.set(&gamma), observed)?;
        let mut best: Option<(ExpressionParams, Pose, f64)> = None;
        let mut history = Vec::new();

        for iter in 0..config.max_iters {
            if iter > 0 {
                let current = self.set(&gamma);
                let candidate = fit_pose(&current, observed)?;
                if squared_cost(current.points(), observed.points(), &candidate)
                    < squared_cost(current.points(), observed.points(), &pose)
                {
                    pose = candidate;
                }
            }
            gamma = self.fit_expression(&pose, observed, lambda)?;
            let residual = landmark_loss(
                &project_weak_perspective(&self.set(&gamma), &pose),
                observed,
            );

            if let Some((_, _, prev)) = &best {
                let prev = *prev;
                if residual > prev + 1e-12 {
                    break;
                }
                history.push(residual);
                best = Some((gamma.clone(), pose.clone(), residual));
                if prev - residual <= config.tol * prev || residual <= floor {
                    break;
                }
            } else {
                history.push(residual);
                best = Some((gamma.clone(), pose.clone(), residual));
                if residual <= floor {
                    break;
                }
            }
        }
        let (gamma, pose, residual) = best.expect("at least one iteration");
        Ok(FitResult {
            gamma,
            pose,
            residual,
            iterations: history.len(),
            history,
        })
    }
}

/// Expression coefficients minimising the squared reprojection error plus
/// `reg_lambda · ‖γ‖²` for a fixed pose.
pub fn fit_expression(
    model: &MorphableModel,
    beta: &IdentityParams,
    pose: &Pose,
    observed: &LandmarkSet2D,
    reg_lambda: f64,
) -> Result<ExpressionParams> {
    LandmarkBasis::new(model, beta)?.fit_expression(pose, observed, reg_lambda)
}

/// Alternates pose and expression solves starting from γ = 0.
pub fn fit(
    model: &MorphableModel,
    beta: &IdentityParams,
    observed: &LandmarkSet2D,
    config: &FitConfig,
) -> Result<FitResult> {
    LandmarkBasis::new(model, beta)?.fit(observed, config)
}

/// Fits every frame; errors carry the frame index. Output order follows input.
pub fn fit_sequence(
    model: &MorphableModel,
    beta: &IdentityParams,
    frames: &[LandmarkSet2D],
    config: &FitConfig,
) -> Result<Vec<FitResult>> {
    let basis = LandmarkBasis::new(model, beta)?;
    let one = |(i, f): (usize, &LandmarkSet2D)| basis.fit(f, config).map_err(|e| e.at_frame(i));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        frames.par_iter().enumerate().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        frames.iter().enumerate().map(one).collect()
    }
}

/// Axis orientation of landmark coordinates in a sequence file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Pixel coordinates, origin top-left, y pointing down.
    #[default]
    ImageYDown,
    /// Mathematical orientation, y pointing up.
    YUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSequence {
    #[serde(default)]
    pub convention: Convention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    pub frames: Vec<LandmarkSet2D>,
}

impl LandmarkSequence {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let seq: Self = io::read_json(path.as_ref())?;
        seq.validate().map_err(|e| Error::File {
            path: path.as_ref().to_path_buf(),
            source: Box::new(e),
        })?;
        Ok(seq)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json_atomic(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Invalid("landmark sequence has no frames".into()));
        }
        if let Some(fps) = self.fps {
            if !(fps > 0.0 && fps.is_finite()) {
                return Err(Error::Invalid(format!("fps {fps} must be positive")));
            }
        }
        Ok(())
    }

    /// Frames in the y-up frame the fitter works in.
    pub fn model_frames(&self) -> Vec<LandmarkSet2D> {
        match self.convention {
            Convention::YUp => self.frames.clone(),
            Convention::ImageYDown => self
                .frames
                .iter()
                .map(|f| f.map(|p| Vector2::new(p.x, -p.y)))
                .collect(),
        }
    }
}
