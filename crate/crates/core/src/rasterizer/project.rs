use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector3};

use super::{Splat, LOW_PASS, MIN_TEMPORAL_WEIGHT, NEAR_PLANE, POWER_CUTOFF};
use crate::geometry::CameraModel;
use crate::gaussians::{quat_exp, rotation_matrix, Gaussian4D};
use crate::scalar::{lit, sigmoid, Scalar};
use crate::sh;

pub(crate) enum Culled {
    Temporal,
    Behind,
    Degenerate,
}

/// Every intermediate of the per-Gaussian forward projection, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Projected<T: Scalar> {
    pub dt: T,
    pub tw: T,
    /// Gated angular displacement `ρ ω dt`.
    pub theta: Vector3<T>,
    /// Unnormalized evolved rotation `exp(θ) ⊗ q`.
    pub q_t: Quaternion<T>,
    pub rot: Matrix3<T>,
    pub xc: Vector3<T>,
    pub cov_cam: Matrix3<T>,
    pub jac: Matrix2x3<T>,
    pub conic: Matrix2<T>,
    pub view_dir: Vector3<T>,
    pub view_dist: T,
    pub sh_basis: Vec<T>,
    pub sh_grad: Vec<Vector3<T>>,
    /// Sigmoid of the SH opacity logit, before temporal weighting.
    pub sigma: T,
    /// `None` when the footprint misses the image entirely.
    pub splat: Option<Splat<T>>,
}

pub(crate) fn project_gaussian<T: Scalar>(
    g: &Gaussian4D<T>,
    id: usize,
    cam: &CameraModel<T>,
    t: T,
) -> Result<Projected<T>, Culled> {
    let tw = g.temporal_weight(t);
    if !(tw >= lit(MIN_TEMPORAL_WEIGHT)) {
        return Err(Culled::Temporal);
    }
    let dt = t - g.tau;
    let (v, w) = g.velocity_at(dt);
    let mu_t = if dt == T::zero() { g.mu } else { g.mu + v * dt };
    let theta = w * dt;
    let q_t = if dt == T::zero() { g.q } else { quat_exp(&theta) * g.q };

    let w2c = cam.rotation().transpose();
    let xc = w2c * (mu_t - cam.center());
    if !(xc.z > lit(NEAR_PLANE)) {
        return Err(Culled::Behind);
    }

    let rot = rotation_matrix(&q_t);
    let s2 = g.s.component_mul(&g.s);
    let cov3 = rot * Matrix3::from_diagonal(&s2) * rot.transpose();
    let cov_cam = w2c * cov3 * w2c.transpose();
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let z2 = z * z;
    let jac = Matrix2x3::new(
        cam.fx / z, T::zero(), -cam.fx * x / z2,
        T::zero(), cam.fy / z, -cam.fy * y / z2,
    );
    let mut cov2 = jac * cov_cam * jac.transpose();
    cov2[(0, 0)] += lit(LOW_PASS);
    cov2[(1, 1)] += lit(LOW_PASS);
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > T::zero()) || !det.is_finite_value() {
        return Err(Culled::Degenerate);
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;

    let offset = mu_t - cam.center();
    let view_dist = offset.norm();
    let view_dir = offset / view_dist;
    let order = g.sh_order().ok_or(Culled::Degenerate)?;
    let (sh_basis, sh_grad) = sh::basis_and_gradient(order, &view_dir, true);
    let logit = sh_basis
        .iter()
        .zip(&g.opacity_sh)
        .fold(T::zero(), |acc, (y, a)| acc + *y * *a);
    let sigma = sigmoid(logit);
    let opacity = sigma * tw;

    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    // Axis-aligned bounds of the support ellipse, padded by a pixel.
    let k2 = lit::<T>(2.0 * POWER_CUTOFF);
    let rx = (k2 * cov2[(0, 0)]).sqrt() + T::one();
    let ry = (k2 * cov2[(1, 1)]).sqrt() + T::one();
    let clamp_range = |lo: T, hi: T, n: usize| -> Option<(usize, usize)> {
        let max = lit::<T>((n - 1) as f64);
        if hi < T::zero() || lo > max || !lo.is_finite_value() || !hi.is_finite_value() {
            return None;
        }
        let lo = lo.max(T::zero()).ceil().to_f64_lossy() as usize;
        let hi = hi.min(max).floor().to_f64_lossy() as usize;
        (lo <= hi).then_some((lo, hi))
    };
    let splat = match (
        clamp_range(mean[0] - rx, mean[0] + rx, cam.width),
        clamp_range(mean[1] - ry, mean[1] + ry, cam.height),
    ) {
        (Some((x0, x1)), Some((y0, y1))) => Some(Splat {
            id,
            mean,
            conic: [conic[(0, 0)], conic[(0, 1)], conic[(1, 1)]],
            opacity,
            depth: z,
            color: g.color,
            bbox: [x0, x1, y0, y1],
        }),
        _ => None,
    };

    Ok(Projected {
        dt,
        tw,
        theta,
        q_t,
        rot,
        xc,
        cov_cam,
        jac,
        conic,
        view_dir,
        view_dist,
        sh_basis,
        sh_grad,
        sigma,
        splat,
    })
}
