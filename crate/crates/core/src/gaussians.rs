//! The 4D Gaussian primitive and the scene container.

use nalgebra::{Matrix3, Matrix4, Quaternion, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::scalar::{lit, logit, sigmoid, Scalar};
use crate::sh::{self, Y00};

/// One splat: static geometry and appearance plus temporal center, lifespan
/// and bidirectional linear/angular velocities.
///
/// `q` is stored as `(w, x, y, z)` and kept unit length. Velocities are m/s,
/// angular rates are axis-angle rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian4D<T: Scalar> {
    pub mu: Vector3<T>,
    pub q: Quaternion<T>,
    pub s: Vector3<T>,
    pub color: Vector3<T>,
    /// Opacity logits as real SH coefficients, `(k+1)²` of them.
    pub opacity_sh: Vec<T>,
    pub tau: T,
    pub lifespan: T,
    pub sigma_t: T,
    pub v_fwd: Vector3<T>,
    pub v_bwd: Vector3<T>,
    pub w_fwd: Vector3<T>,
    pub w_bwd: Vector3<T>,
    pub gate: T,
}

impl<T: Scalar> Gaussian4D<T> {
    /// Static isotropic Gaussian with a view-independent opacity.
    pub fn isotropic(mu: Vector3<T>, scale: T, color: Vector3<T>, opacity: T, sh_order: u32) -> Self {
        let mut opacity_sh = vec![T::zero(); sh::coeff_count(sh_order)];
        opacity_sh[0] = dc_logit(opacity);
        Self {
            mu,
            q: Quaternion::identity(),
            s: Vector3::repeat(scale),
            color,
            opacity_sh,
            tau: T::zero(),
            lifespan: T::infinity(),
            sigma_t: T::infinity(),
            v_fwd: Vector3::zeros(),
            v_bwd: Vector3::zeros(),
            w_fwd: Vector3::zeros(),
            w_bwd: Vector3::zeros(),
            gate: T::one(),
        }
    }

    /// Gated linear and angular velocity active at offset `dt` from `tau`.
    pub fn velocity_at(&self, dt: T) -> (Vector3<T>, Vector3<T>) {
        let (v, w) = if dt >= T::zero() {
            (self.v_fwd, self.w_fwd)
        } else {
            (self.v_bwd, self.w_bwd)
        };
        (v * self.gate, w * self.gate)
    }

    /// Position and orientation at time `t`: first-order motion about `tau`.
    pub fn evolve(&self, t: T) -> (Vector3<T>, Quaternion<T>) {
        let dt = t - self.tau;
        if dt == T::zero() {
            return (self.mu, self.q);
        }
        let (v, w) = self.velocity_at(dt);
        let mu = self.mu + v * dt;
        let q = quat_exp(&(w * dt)) * self.q;
        (mu, q.normalize())
    }

    /// Visibility attenuation around `tau`, zero outside the lifespan.
    pub fn temporal_weight(&self, t: T) -> T {
        let dt = t - self.tau;
        if dt.abs() > self.lifespan / lit(2.0) {
            return T::zero();
        }
        (-(dt * dt) / (lit::<T>(2.0) * self.sigma_t * self.sigma_t)).exp()
    }

    pub fn sh_order(&self) -> Option<u32> {
        sh::order_for_count(self.opacity_sh.len())
    }

    /// SH opacity logit along a unit direction, before the sigmoid.
    pub fn opacity_logit(&self, dir: &Vector3<T>) -> T {
        let order = self.sh_order().expect("validated sh length");
        sh::eval_basis(order, dir)
            .iter()
            .zip(&self.opacity_sh)
            .fold(T::zero(), |acc, (y, a)| acc + *y * *a)
    }

    /// View-dependent opacity in (0, 1).
    pub fn opacity_at(&self, view_dir: &Vector3<T>) -> Result<T> {
        let dir = checked_unit(view_dir)?;
        Ok(sigmoid(self.opacity_logit(&dir)))
    }

    /// Opacity of the `l = 0` band alone.
    pub fn dc_opacity(&self) -> T {
        sigmoid(self.opacity_sh[0] * lit(Y00))
    }

    /// `R(q) diag(s²) R(q)ᵀ`.
    pub fn covariance(&self) -> Matrix3<T> {
        covariance_from(&self.q, &self.s)
    }

    pub fn validate(&self, sh_order: u32) -> std::result::Result<(), String> {
        let mut problems = Vec::new();
        let norm = self.q.norm();
        if !((norm - T::one()).abs() < lit::<T>(1e-9).max(T::default_epsilon() * lit(16.0))) {
            problems.push(format!("|q| = {norm} is not unit"));
        }
        if !self.s.iter().all(|&v| v > T::zero() && v.is_finite_value()) {
            problems.push(format!("scales must be positive and finite: {:?}", self.s.as_slice()));
        }
        if !(self.sigma_t > T::zero()) {
            problems.push(format!("sigma_t = {} must be positive", self.sigma_t));
        }
        if !(self.lifespan >= T::zero()) {
            problems.push(format!("lifespan = {} must be non-negative", self.lifespan));
        }
        if !(self.gate > T::zero() && self.gate <= T::one()) {
            problems.push(format!("gate = {} must lie in (0, 1]", self.gate));
        }
        if !self.color.iter().all(|&c| c >= T::zero() && c <= T::one()) {
            problems.push(format!("color {:?} outside [0,1]", self.color.as_slice()));
        }
        if self.opacity_sh.len() != sh::coeff_count(sh_order) {
            problems.push(format!(
                "{} opacity coefficients, expected {} for order {sh_order}",
                self.opacity_sh.len(),
                sh::coeff_count(sh_order)
            ));
        }
        let finite = self.mu.iter().chain(self.v_fwd.iter()).chain(self.v_bwd.iter())
            .chain(self.w_fwd.iter()).chain(self.w_bwd.iter()).chain(self.opacity_sh.iter())
            .chain(std::iter::once(&self.tau))
            .all(|v| v.is_finite_value());
        if !finite {
            problems.push("non-finite attribute".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join(", "))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Gaussian4D<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        let v3 = |v: &Vector3<T>| v.map(c);
        Gaussian4D {
            mu: v3(&self.mu),
            q: Quaternion::from(self.q.coords.map(c)),
            s: v3(&self.s),
            color: v3(&self.color),
            opacity_sh: self.opacity_sh.iter().map(|&v| c(v)).collect(),
            tau: c(self.tau),
            lifespan: c(self.lifespan),
            sigma_t: c(self.sigma_t),
            v_fwd: v3(&self.v_fwd),
            v_bwd: v3(&self.v_bwd),
            w_fwd: v3(&self.w_fwd),
            w_bwd: v3(&self.w_bwd),
            gate: c(self.gate),
        }
    }
}

/// DC coefficient whose `l = 0` opacity equals `opacity`.
pub fn dc_logit<T: Scalar>(opacity: T) -> T {
    logit(opacity) / lit(Y00)
}

/// Accepts directions within 1e-6 of unit as-is, renormalizes up to 1e-3.
pub(crate) fn checked_unit<T: Scalar>(dir: &Vector3<T>) -> Result<Vector3<T>> {
    let norm = dir.norm();
    let off = (norm - T::one()).abs();
    if off <= lit(1e-6) {
        Ok(*dir)
    } else if off <= lit(1e-3) {
        Ok(dir / norm)
    } else {
        Err(Error::NonUnitDirection {
            norm: norm.to_f64_lossy(),
        })
    }
}

/// Quaternion exponential of an axis-angle vector.
pub fn quat_exp<T: Scalar>(theta: &Vector3<T>) -> Quaternion<T> {
    let angle = theta.norm();
    let half = angle / lit(2.0);
    if angle < lit(1e-12) {
        let v = theta / lit::<T>(2.0);
        return Quaternion::new(T::one(), v.x, v.y, v.z).normalize();
    }
    let k = half.sin() / angle;
    Quaternion::new(half.cos(), theta.x * k, theta.y * k, theta.z * k)
}

/// Jacobian of [`quat_exp`], rows `(w, x, y, z)`, columns `θ`.
pub(crate) fn quat_exp_jacobian<T: Scalar>(theta: &Vector3<T>) -> nalgebra::Matrix4x3<T> {
    let angle = theta.norm();
    let half = lit::<T>(0.5);
    let mut j = nalgebra::Matrix4x3::zeros();
    if angle < lit(1e-8) {
        // Series: w ≈ 1 - |θ|²/8, v ≈ θ/2 (1 - |θ|²/24).
        for c in 0..3 {
            j[(0, c)] = -theta[c] / lit(4.0);
            j[(c + 1, c)] = half;
        }
        return j;
    }
    let u = theta / angle;
    let (sh, ch) = ((angle * half).sin(), (angle * half).cos());
    let a = sh / angle;
    let uu = u * u.transpose();
    let dv = (Matrix3::identity() - uu) * a + uu * (ch * half);
    for c in 0..3 {
        j[(0, c)] = -half * sh * u[c];
        for r in 0..3 {
            j[(r + 1, c)] = dv[(r, c)];
        }
    }
    j
}

/// Matrix `L(p)` with `p ⊗ q = L(p) q` on `(w, x, y, z)` vectors.
pub(crate) fn left_mul_matrix<T: Scalar>(p: &Quaternion<T>) -> Matrix4<T> {
    let (w, x, y, z) = (p.w, p.i, p.j, p.k);
    Matrix4::new(
        w, -x, -y, -z,
        x, w, -z, y,
        y, z, w, -x,
        z, -y, x, w,
    )
}

/// Matrix `R(q) ` with `p ⊗ q = R(q) p` on `(w, x, y, z)` vectors.
pub(crate) fn right_mul_matrix<T: Scalar>(q: &Quaternion<T>) -> Matrix4<T> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z,
        x, w, z, -y,
        y, -z, w, x,
        z, y, -x, w,
    )
}

/// Rotation matrix of `q / |q|`.
pub fn rotation_matrix<T: Scalar>(q: &Quaternion<T>) -> Matrix3<T> {
    let n = q.normalize();
    let (w, x, y, z) = (n.w, n.i, n.j, n.k);
    let one = T::one();
    let two = lit::<T>(2.0);
    Matrix3::new(
        one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y),
    )
}

/// Pulls `∂L/∂R` back to the raw (unnormalized) quaternion `(w, x, y, z)`.
pub(crate) fn rotation_vjp<T: Scalar>(q: &Quaternion<T>, d_r: &Matrix3<T>) -> Vector4<T> {
    let norm = q.norm();
    let n = q.normalize();
    let (w, x, y, z) = (n.w, n.i, n.j, n.k);
    let two = lit::<T>(2.0);
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = two * (z * (g(1, 0) - g(0, 1)) + y * (g(0, 2) - g(2, 0)) + x * (g(2, 1) - g(1, 2)));
    let dx = two * (y * (g(1, 0) + g(0, 1)) + z * (g(2, 0) + g(0, 2)) + w * (g(2, 1) - g(1, 2)))
        - two * two * x * (g(1, 1) + g(2, 2));
    let dy = two * (x * (g(1, 0) + g(0, 1)) + w * (g(0, 2) - g(2, 0)) + z * (g(1, 2) + g(2, 1)))
        - two * two * y * (g(0, 0) + g(2, 2));
    let dz = two * (w * (g(1, 0) - g(0, 1)) + x * (g(0, 2) + g(2, 0)) + y * (g(1, 2) + g(2, 1)))
        - two * two * z * (g(0, 0) + g(1, 1));
    let dn = Vector4::new(dw, dx, dy, dz);
    let nv = Vector4::new(w, x, y, z);
    (dn - nv * nv.dot(&dn)) / norm
}

pub fn covariance_from<T: Scalar>(q: &Quaternion<T>, s: &Vector3<T>) -> Matrix3<T> {
    let m = rotation_matrix(q) * Matrix3::from_diagonal(&s.component_mul(s));
    m * rotation_matrix(q).transpose()
}

/// Gaussians, cameras and the shared timestamp grid of a synchronized rig.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene4D<T: Scalar> {
    pub gaussians: Vec<Gaussian4D<T>>,
    pub cameras: Vec<CameraModel<T>>,
    /// Frame timestamps in seconds, shared by every camera.
    pub timestamps: Vec<T>,
    pub sh_order: u32,
}

impl<T: Scalar> Scene4D<T> {
    pub fn new(sh_order: u32) -> Self {
        Self {
            gaussians: Vec::new(),
            cameras: Vec::new(),
            timestamps: Vec::new(),
            sh_order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (i, g) in self.gaussians.iter().enumerate() {
            if let Err(e) = g.validate(self.sh_order) {
                problems.push(format!("gaussian #{i}: {e}"));
            }
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if let Err(e) = c.validate() {
                problems.push(format!("camera #{i}: {e}"));
            }
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            problems.push("timestamps must be strictly increasing".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Scene4D<U> {
        Scene4D {
            gaussians: self.gaussians.iter().map(Gaussian4D::cast).collect(),
            cameras: self.cameras.iter().map(CameraModel::cast).collect(),
            timestamps: self.timestamps.iter().map(|t| U::lit(t.to_f64_lossy())).collect(),
            sh_order: self.sh_order,
        }
    }
}

/// Keeps the Gaussians whose DC opacity is at least `threshold`, in order.
pub fn prune<T: Scalar>(scene: &Scene4D<T>, threshold: T) -> Scene4D<T> {
    Scene4D {
        gaussians: scene
            .gaussians
            .iter()
            .filter(|g| g.dc_opacity() >= threshold)
            .cloned()
            .collect(),
        ..scene.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wxyz(q: &Quaternion<f64>) -> Vector4<f64> {
        Vector4::new(q.w, q.i, q.j, q.k)
    }

    fn from_wxyz(v: &Vector4<f64>) -> Quaternion<f64> {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    fn moving() -> Gaussian4D<f64> {
        let mut g = Gaussian4D::isotropic(Vector3::new(0.1, 0.2, 0.3), 0.1, Vector3::repeat(0.5), 0.5, 0);
        g.tau = 1.0;
        g.v_fwd = Vector3::new(1.0, 0.0, 0.0);
        g.v_bwd = Vector3::new(0.0, -2.0, 0.0);
        g.w_fwd = Vector3::new(0.0, 0.0, 0.4);
        g.sigma_t = 0.5;
        g.lifespan = 2.0;
        g
    }

    #[test]
    fn evolve_at_center_is_exact() {
        let g = moving();
        let (mu, q) = g.evolve(g.tau);
        assert_eq!(mu, g.mu);
        assert_eq!(q, g.q);
    }

    #[test]
    fn evolve_linear_and_gated() {
        let g = moving();
        let (mu, _) = g.evolve(1.5);
        assert_relative_eq!(mu, g.mu + Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
        let (mu, _) = g.evolve(0.5);
        assert_relative_eq!(mu, g.mu + Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let mut g = moving();
        g.gate = 0.25;
        g.v_fwd = Vector3::new(4.0, 0.0, 0.0);
        let (mu, _) = g.evolve(2.0);
        assert_relative_eq!(mu, g.mu + g.v_fwd.component_mul(&Vector3::repeat(0.25)), epsilon = 1e-15);
    }

    #[test]
    fn evolve_rotation_composes_exponential() {
        let g = moving();
        let (_, q) = g.evolve(2.0);
        let expect = UnitQuaternion::from_scaled_axis(g.w_fwd) * UnitQuaternion::from_quaternion(g.q);
        assert_relative_eq!(q, *expect.quaternion(), epsilon = 1e-14);
    }

    #[test]
    fn evolve_limits_agree_at_center() {
        let g = moving();
        let eps = 1e-9;
        let (a, _) = g.evolve(g.tau - eps);
        let (b, _) = g.evolve(g.tau + eps);
        assert!((a - g.mu).norm() < 1e-8 && (b - g.mu).norm() < 1e-8);
    }

    #[test]
    fn temporal_weight_values() {
        let mut g = moving();
        assert_eq!(g.temporal_weight(g.tau), 1.0);
        g.lifespan = f64::INFINITY;
        assert_relative_eq!(g.temporal_weight(g.tau + g.sigma_t), (-0.5f64).exp(), epsilon = 1e-15);
        g.lifespan = 2.0;
        assert_eq!(g.temporal_weight(g.tau + 1.0 + 1e-9), 0.0);
        assert!(g.temporal_weight(g.tau + 1.0) > 0.0);
    }

    #[test]
    fn opacity_order_zero_is_isotropic() {
        let mut g = moving();
        g.opacity_sh[0] = 0.0;
        assert_eq!(g.opacity_at(&Vector3::z()).unwrap(), 0.5);
        g.opacity_sh[0] = 1.7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..1000)
            .map(|_| {
                let d = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                g.opacity_at(&d).unwrap()
            })
            .collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-12);
    }

    #[test]
    fn opacity_direction_checks() {
        let g = moving();
        assert!(g.opacity_at(&Vector3::new(0.0, 0.0, 1.0005)).is_ok());
        assert!(matches!(
            g.opacity_at(&Vector3::new(0.0, 0.0, 1.1)),
            Err(Error::NonUnitDirection { .. })
        ));
    }

    #[test]
    fn covariance_examples() {
        let mut g = moving();
        g.s = Vector3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(g.covariance(), Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)), epsilon = 1e-15);
        g.q = *UnitQuaternion::from_euler_angles(0.4, 1.0, -2.0).quaternion();
        g.s = Vector3::repeat(0.7);
        assert_relative_eq!(g.covariance(), Matrix3::identity() * 0.49, epsilon = 1e-14);
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let q = Quaternion::new(0.9, -0.3, 0.2, 0.5);
        let d_r = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.5, 0.9, -0.6);
        let f = |q: &Quaternion<f64>| rotation_matrix(q).component_mul(&d_r).sum();
        let g = rotation_vjp(&q, &d_r);
        let h = 1e-6;
        for i in 0..4 {
            let mut p = wxyz(&q);
            let mut m = wxyz(&q);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&from_wxyz(&p)) - f(&from_wxyz(&m))) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn quat_exp_jacobian_matches_finite_differences() {
        for theta in [Vector3::<f64>::new(0.3, -0.7, 0.2), Vector3::new(1e-10, 0.0, -2e-10)] {
            let j = quat_exp_jacobian(&theta);
            let h = 1e-6;
            for c in 0..3 {
                let mut p = theta;
                let mut m = theta;
                p[c] += h;
                m[c] -= h;
                let fd = (wxyz(&quat_exp(&p)) - wxyz(&quat_exp(&m))) / (2.0 * h);
                for r in 0..4 {
                    assert!((fd[r] - j[(r, c)]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn quaternion_product_matrices() {
        let p = Quaternion::new(0.1, 0.2, -0.3, 0.4);
        let q = Quaternion::new(-0.5, 0.6, 0.7, 0.8);
        let pq = wxyz(&(p * q));
        assert_relative_eq!(left_mul_matrix(&p) * wxyz(&q), pq, epsilon = 1e-15);
        assert_relative_eq!(right_mul_matrix(&q) * wxyz(&p), pq, epsilon = 1e-15);
    }

    #[test]
    fn prune_thresholds() {
        let mut scene = Scene4D::new(0);
        for o in [0.5, 0.5, 0.5] {
            scene.gaussians.push(Gaussian4D::isotropic(Vector3::zeros(), 0.1, Vector3::zeros(), o, 0));
        }
        assert_eq!(prune(&scene, 0.01), scene);
        assert!(prune(&scene, 1.0).is_empty());
    }

    #[test]
    fn validation_lists_problems() {
        let mut g = moving();
        g.s.x = -1.0;
        g.gate = 0.0;
        let err = g.validate(0).unwrap_err();
        assert!(err.contains("scales") && err.contains("gate"));
        assert!(g.validate(1).unwrap_err().contains("opacity coefficients"));
    }
}
