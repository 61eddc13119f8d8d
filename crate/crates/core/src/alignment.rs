//! Closed-form similarity alignment of point sets and the two-pass mapping of
//! target poses into a reconstruction's frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::scalar::{lit, Scalar};

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Sim3<T: Scalar> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Sim3<T> {
    pub fn new(scale: T, rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), Matrix3::identity(), Vector3::zeros())
    }

    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x * self.scale + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Sim3<T>) -> Sim3<T> {
        Sim3::new(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.rotation * other.translation * self.scale + self.translation,
        )
    }

    pub fn inverse(&self) -> Sim3<T> {
        let rt = self.rotation.transpose();
        let inv_s = T::one() / self.scale;
        Sim3::new(inv_s, rt, -(rt * self.translation) * inv_s)
    }

    /// Maps a camera-to-world pose: center through the similarity, rotation
    /// left-composed with `R`. Scale does not act on rotations.
    pub fn apply_pose(&self, pose: &Pose<T>) -> Pose<T> {
        Pose::new(self.rotation * pose.rotation, self.apply(&pose.translation))
    }

    /// Sum of squared residuals `Σ‖dst − T(src)‖²`.
    pub fn residual(&self, src: &[Vector3<T>], dst: &[Vector3<T>]) -> T {
        src.iter()
            .zip(dst)
            .fold(T::zero(), |acc, (s, d)| acc + (d - self.apply(s)).norm_squared())
    }
}

/// Result of a closed-form fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityFit<T: Scalar> {
    pub transform: Sim3<T>,
    /// Sum of squared residuals at the optimum.
    pub residual: T,
    /// Ratio of the second to the largest singular value of the cross
    /// covariance; near zero when the rotation is poorly determined.
    pub conditioning: T,
    /// Cross covariance has rank below two (collinear points): the rotation
    /// about the point line is arbitrary.
    pub ambiguous: bool,
}

fn centroid<T: Scalar>(pts: &[Vector3<T>]) -> Vector3<T> {
    pts.iter().fold(Vector3::zeros(), |a, p| a + p) / lit::<T>(pts.len() as f64)
}

fn fit<T: Scalar>(src: &[Vector3<T>], dst: &[Vector3<T>], with_scale: bool, min_points: usize) -> Result<SimilarityFit<T>> {
    if src.len() != dst.len() {
        return Err(Error::shape(format!("{} destination points", src.len()), dst.len()));
    }
    if src.len() < min_points {
        return Err(Error::Degenerate(format!(
            "need at least {min_points} point pairs, got {}",
            src.len()
        )));
    }
    let n = lit::<T>(src.len() as f64);
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let mut cov = Matrix3::zeros();
    let mut var_s = T::zero();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let spread = src.iter().fold(T::zero(), |m, p| m.max(p.norm())) + T::one();
    if !(var_s > T::default_epsilon() * spread * spread) {
        return Err(Error::Degenerate("source points are coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Singular values are unsorted in nalgebra; sort indices descending.
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        sign[(order[2], order[2])] = -T::one();
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&sv) * sign).trace() / var_s
    } else {
        T::one()
    };
    let translation = mu_d - rotation * mu_s * scale;
    let transform = Sim3::new(scale, rotation, translation);

    let largest = sv[order[0]];
    let conditioning = if largest > T::zero() {
        sv[order[1]] / largest
    } else {
        T::zero()
    };
    let ambiguous = !(conditioning > lit(1e-9));
    Ok(SimilarityFit {
        residual: transform.residual(src, dst),
        transform,
        conditioning,
        ambiguous,
    })
}

/// Least-squares similarity `dst ≈ s R src + t` (Umeyama), with the
/// determinant correction so `R` is always a proper rotation.
pub fn umeyama<T: Scalar>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<SimilarityFit<T>> {
    fit(src, dst, true, 3)
}

/// Least-squares rigid transform (scale fixed to one).
pub fn rigid_fit<T: Scalar>(src: &[Vector3<T>], dst: &[Vector3<T>]) -> Result<SimilarityFit<T>> {
    fit(src, dst, false, 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPoses<T: Scalar> {
    /// Maps the second pass's frame into the first pass's frame.
    pub transform: Sim3<T>,
    pub poses: Vec<Pose<T>>,
    pub fit: SimilarityFit<T>,
    /// True when fewer than three context cameras forced a rigid fit.
    pub rigid_fallback: bool,
}

/// Maps target poses from a second forward pass into the frame defined by the
/// first pass, using the context cameras seen by both.
pub fn align_target_poses<T: Scalar>(
    ctx_pass1: &[Pose<T>],
    ctx_pass2: &[Pose<T>],
    targets_pass2: &[Pose<T>],
) -> Result<AlignedPoses<T>> {
    if ctx_pass1.len() != ctx_pass2.len() {
        return Err(Error::shape(
            format!("{} second-pass context poses", ctx_pass1.len()),
            ctx_pass2.len(),
        ));
    }
    let src: Vec<_> = ctx_pass2.iter().map(Pose::center).collect();
    let dst: Vec<_> = ctx_pass1.iter().map(Pose::center).collect();
    let rigid_fallback = src.len() < 3;
    let fit = if rigid_fallback {
        rigid_fit(&src, &dst)?
    } else {
        umeyama(&src, &dst)?
    };
    if fit.ambiguous || fit.conditioning < lit(1e-3) {
        log::warn!(
            "pose alignment poorly conditioned (ratio {}); rotation about the camera line is unobservable",
            fit.conditioning
        );
    }
    Ok(AlignedPoses {
        transform: fit.transform,
        poses: targets_pass2.iter().map(|p| fit.transform.apply_pose(p)).collect(),
        fit,
        rigid_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn points() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.4, 1.5, 0.7),
            Vector3::new(0.3, -0.8, 2.0),
            Vector3::new(2.2, 1.1, 0.4),
        ]
    }

    #[test]
    fn identity_fit() {
        let p = points();
        let f = umeyama(&p, &p).unwrap();
        assert_relative_eq!(f.transform.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.transform.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(f.transform.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn reflection_is_rejected() {
        let p = points();
        let q: Vec<_> = p.iter().map(|v| Vector3::new(-v.x, v.y, v.z)).collect();
        let f = umeyama(&p, &q).unwrap();
        assert_relative_eq!(f.transform.rotation.determinant(), 1.0, epsilon = 1e-12);
        assert!(f.residual > 1e-3);
    }

    #[test]
    fn degenerate_inputs() {
        let p = points();
        assert!(umeyama(&p[..2], &p[..2]).is_err());
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(umeyama(&same, &same), Err(Error::Degenerate(_))));
        assert!(umeyama(&p, &p[..4]).is_err());
    }

    #[test]
    fn collinear_is_flagged() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let f = umeyama(&line, &line).unwrap();
        assert!(f.ambiguous);
        assert!(f.residual < 1e-20);
    }

    #[test]
    fn sim3_algebra() {
        let x = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(Sim3::identity().apply(&x), x);
        let s = Sim3::new(2.0, Matrix3::identity(), Vector3::zeros());
        assert_eq!(s.apply(&x), x * 2.0);
        let r = UnitQuaternion::from_euler_angles(0.1, 0.5, -0.3).to_rotation_matrix().into_inner();
        let t = Sim3::new(1.7, r, Vector3::new(1.0, -2.0, 0.5));
        assert_relative_eq!(t.inverse().apply(&t.apply(&x)), x, epsilon = 1e-12);
        let u = t.compose(&s);
        assert_relative_eq!(u.apply(&x), t.apply(&s.apply(&x)), epsilon = 1e-12);
    }

    #[test]
    fn two_camera_rigid_fallback() {
        let a = [Pose::identity(), Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0))];
        let shift = Vector3::new(0.0, 0.0, 3.0);
        let b: Vec<_> = a.iter().map(|p| Pose::new(p.rotation, p.translation + shift)).collect();
        let out = align_target_poses(&a, &b, &b).unwrap();
        assert!(out.rigid_fallback);
        assert_eq!(out.transform.scale, 1.0);
        for (p, q) in out.poses.iter().zip(&a) {
            assert_relative_eq!(p.translation, q.translation, epsilon = 1e-12);
        }
        assert!(align_target_poses(&a[..1], &b[..1], &b).is_err());
    }
}
