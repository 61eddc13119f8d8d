//! Pinhole camera math: projection, depth-map unprojection and rig pose
//! averaging.
//!
//! Poses are camera-to-world: a camera-frame point `x` maps to the world as
//! `R x + t`. Pixel `(x, y)` addresses the pixel center, with the origin at the
//! center of the top-left pixel.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Minimum camera-frame depth accepted by [`CameraModel::project_point`].
pub const PROJECTION_EPS: f64 = 1e-8;

/// Orthonormality tolerance: 1e-9 in double precision, a few ulps otherwise.
pub(crate) fn rotation_tolerance<T: Scalar>() -> T {
    lit::<T>(1e-9).max(T::default_epsilon() * lit(64.0))
}

/// Rigid camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Pose<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self::new(q.to_rotation_matrix().into_inner(), translation)
    }

    /// Camera-to-world looking from `eye` at `target`. `down` is the world
    /// direction that should appear as +y (downwards) in the image.
    pub fn look_at(eye: Vector3<T>, target: Vector3<T>, down: Vector3<T>) -> Self {
        let forward = (target - eye).normalize();
        let right = down.cross(&forward).normalize();
        let image_down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, image_down, forward]);
        Self::new(rotation, eye)
    }

    pub fn quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        self.translation
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Left-composes a rigid transform `g` (applied in world space).
    pub fn premultiply(&self, g: &Pose<T>) -> Pose<T> {
        Pose::new(
            g.rotation * self.rotation,
            g.rotation * self.translation + g.translation,
        )
    }

    /// `‖RᵀR − I‖∞` and the determinant.
    pub fn orthonormality_error(&self) -> (T, T) {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        (e.amax(), self.rotation.determinant())
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose::new(
            self.rotation.map(|v| U::lit(v.to_f64_lossy())),
            self.translation.map(|v| U::lit(v.to_f64_lossy())),
        )
    }
}

/// Pinhole intrinsics with a camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct CameraModel<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub pose: Pose<T>,
    pub width: usize,
    pub height: usize,
}

/// Pixel coordinates plus camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
}

impl<T: Scalar> CameraModel<T> {
    /// Validating constructor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        pose: Pose<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            pose,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with a symmetric field of view (`fov_x` in radians) centered on
    /// the image.
    pub fn with_fov(fov_x: T, pose: Pose<T>, width: usize, height: usize) -> Result<Self> {
        let two = lit::<T>(2.0);
        let f = lit::<T>(width as f64) / (two * (fov_x / two).tan());
        let cx = lit::<T>((width as f64 - 1.0) / 2.0);
        let cy = lit::<T>((height as f64 - 1.0) / 2.0);
        Self::new(f, f, cx, cy, pose, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            problems.push(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            ));
        }
        if self.width == 0 || self.height == 0 {
            problems.push(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            ));
        }
        let (ortho, det) = self.pose.orthonormality_error();
        let tol = rotation_tolerance::<T>();
        if !(ortho < tol) || !((det - T::one()).abs() < tol) {
            problems.push(format!(
                "rotation is not a proper rotation (|RtR-I|={}, det={})",
                ortho, det
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCamera(problems.join(", ")))
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.pose.rotation
    }

    pub fn center(&self) -> Vector3<T> {
        self.pose.translation
    }

    /// Camera-frame point on the ray through pixel `(x, y)` at depth `d`.
    pub fn pixel_to_camera(&self, x: T, y: T, d: T) -> Vector3<T> {
        Vector3::new(
            d * (x - self.cx) / self.fx,
            d * (y - self.cy) / self.fy,
            d,
        )
    }

    /// World point seen at pixel `(x, y)` with depth `d`.
    pub fn unproject(&self, x: T, y: T, d: T) -> Vector3<T> {
        self.pose.transform_point(&self.pixel_to_camera(x, y, d))
    }

    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.pose.inverse_transform_point(p)
    }

    pub fn project_point(&self, p: &Vector3<T>) -> Result<Projection<T>> {
        let xc = self.world_to_camera(p);
        if !(xc.z > lit(PROJECTION_EPS)) {
            return Err(Error::BehindCamera {
                z: xc.z.to_f64_lossy(),
            });
        }
        Ok(Projection {
            u: self.fx * xc.x / xc.z + self.cx,
            v: self.fy * xc.y / xc.z + self.cy,
            depth: xc.z,
        })
    }

    pub fn with_pose(&self, pose: Pose<T>) -> Self {
        Self { pose, ..*self }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn cast<U: Scalar>(&self) -> CameraModel<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        CameraModel {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            pose: self.pose.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

/// Per-pixel depths with a validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> DepthMap<T> {
    /// Builds a depth map, marking non-finite or non-positive entries invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                format!("{} values for {width}x{height}", width * height),
                values.len(),
            ));
        }
        let valid = values
            .iter()
            .map(|&d| d.is_finite_value() && d > T::zero())
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, d: T) -> Self {
        Self::from_values(width, height, vec![d; width * height]).expect("sizes agree")
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<T> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }
}

/// World-space points per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<T>>,
    pub valid: Vec<bool>,
}

/// Lifts every valid depth pixel to a world-space point.
pub fn unproject_depth<T: Scalar>(depth: &DepthMap<T>, cam: &CameraModel<T>) -> Result<PointMap<T>> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::shape(
            format!("camera {}x{}", cam.width, cam.height),
            format!("depth map {}x{}", depth.width, depth.height),
        ));
    }
    let mut points = Vec::with_capacity(depth.values.len());
    let mut valid = Vec::with_capacity(depth.values.len());
    for y in 0..depth.height {
        for x in 0..depth.width {
            match depth.get(x, y) {
                Some(d) => {
                    points.push(cam.unproject(lit(x as f64), lit(y as f64), d));
                    valid.push(true);
                }
                None => {
                    points.push(Vector3::zeros());
                    valid.push(false);
                }
            }
        }
    }
    Ok(PointMap {
        width: depth.width,
        height: depth.height,
        points,
        valid,
    })
}

/// Rig pose from per-frame estimates: mean translation and quaternion
/// eigen-average rotation.
pub fn average_rig_poses<T: Scalar>(poses: &[Pose<T>]) -> Result<Pose<T>> {
    let first = poses.first().ok_or(Error::Empty("pose list"))?;
    let n = lit::<T>(poses.len() as f64);

    let translation = poses
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.translation)
        / n;

    let mut outer = Matrix4::<T>::zeros();
    for p in poses {
        let q = p.quaternion().into_inner().coords;
        outer += q * q.transpose();
    }
    let eig = outer.symmetric_eigen();
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, T::min_value().unwrap()), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let mut mean = eig.eigenvectors.column(best).into_owned();
    let reference = first.quaternion().into_inner().coords;
    if mean.dot(&reference) < T::zero() {
        mean = -mean;
    }
    let q = UnitQuaternion::from_quaternion(Quaternion::from(mean));
    Ok(Pose::from_quaternion(&q, translation))
}
