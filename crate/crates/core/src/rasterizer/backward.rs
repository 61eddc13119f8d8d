//! Reverse-mode pass for the color channel.
//!
//! Each pixel's front-to-back chain is recomputed and walked back to front,
//! carrying the color composited behind the current splat, so no division by
//! `1 − α` is needed.

use nalgebra::{Matrix2, Matrix3, Vector3, Vector4};

use super::{composite_pixel, prepare, tile_pixels, Contribution, Rasterizer};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::gaussians::{left_mul_matrix, quat_exp_jacobian, right_mul_matrix, rotation_vjp, Scene4D};
use crate::image::Image;
use crate::scalar::{lit, Scalar};

/// Partial derivatives of a scalar loss for one Gaussian. Quaternion entries
/// are `(w, x, y, z)` with respect to the stored (raw) quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad<T: Scalar> {
    pub mu: Vector3<T>,
    pub q: Vector4<T>,
    pub s: Vector3<T>,
    pub color: Vector3<T>,
    pub opacity_sh: Vec<T>,
    pub tau: T,
    pub sigma_t: T,
    pub v_fwd: Vector3<T>,
    pub v_bwd: Vector3<T>,
    pub w_fwd: Vector3<T>,
    pub w_bwd: Vector3<T>,
    pub gate: T,
}

impl<T: Scalar> GaussianGrad<T> {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            mu: Vector3::zeros(),
            q: Vector4::zeros(),
            s: Vector3::zeros(),
            color: Vector3::zeros(),
            opacity_sh: vec![T::zero(); sh_len],
            tau: T::zero(),
            sigma_t: T::zero(),
            v_fwd: Vector3::zeros(),
            v_bwd: Vector3::zeros(),
            w_fwd: Vector3::zeros(),
            w_bwd: Vector3::zeros(),
            gate: T::zero(),
        }
    }

    pub fn add_scaled(&mut self, other: &GaussianGrad<T>, k: T) {
        self.mu += other.mu * k;
        self.q += other.q * k;
        self.s += other.s * k;
        self.color += other.color * k;
        for (a, b) in self.opacity_sh.iter_mut().zip(&other.opacity_sh) {
            *a += *b * k;
        }
        self.tau += other.tau * k;
        self.sigma_t += other.sigma_t * k;
        self.v_fwd += other.v_fwd * k;
        self.v_bwd += other.v_bwd * k;
        self.w_fwd += other.w_fwd * k;
        self.w_bwd += other.w_bwd * k;
        self.gate += other.gate * k;
    }

    pub fn is_finite(&self) -> bool {
        let vals = self.mu.iter().chain(self.q.iter()).chain(self.s.iter()).chain(self.color.iter())
            .chain(self.opacity_sh.iter()).chain(self.v_fwd.iter()).chain(self.v_bwd.iter())
            .chain(self.w_fwd.iter()).chain(self.w_bwd.iter())
            .chain([&self.tau, &self.sigma_t, &self.gate]);
        vals.into_iter().all(|v| v.is_finite_value())
    }
}

/// Per-Gaussian gradients, indexed like the scene's Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads<T: Scalar> {
    pub grads: Vec<GaussianGrad<T>>,
}

/// Screen-space adjoints of one splat.
#[derive(Debug, Clone, Copy)]
struct SplatAdjoint<T> {
    mean: [T; 2],
    conic: [T; 3],
    opacity: T,
    color: Vector3<T>,
}

impl<T: Scalar> SplatAdjoint<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            opacity: T::zero(),
            color: Vector3::zeros(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

impl Rasterizer {
    /// Gradients of `Σ_pixels ⟨grad_color, color⟩` with respect to every
    /// Gaussian's parameters. Culled Gaussians get zeros.
    pub fn backward<T: Scalar>(
        &self,
        scene: &Scene4D<T>,
        cam: &CameraModel<T>,
        t: T,
        grad_color: &Image<T>,
    ) -> Result<GaussianGrads<T>> {
        if grad_color.width != cam.width || grad_color.height != cam.height {
            return Err(Error::shape(
                format!("adjoint image {}x{} (camera)", cam.width, cam.height),
                format!("{}x{}", grad_color.width, grad_color.height),
            ));
        }
        let prep = prepare(scene, cam, t);
        let (w, h) = (cam.width, cam.height);

        let per_tile = self.map_tiles(prep.tiles.len(), |tile| {
            let list = &prep.tiles[tile];
            let mut adj = vec![SplatAdjoint::zero(); list.len()];
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, w, h);
            let mut chain: Vec<Contribution<T>> = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let i = y * w + x;
                    let g = Vector3::new(grad_color.data[3 * i], grad_color.data[3 * i + 1], grad_color.data[3 * i + 2]);
                    if g == Vector3::zeros() {
                        continue;
                    }
                    chain.clear();
                    composite_pixel(
                        list.iter().map(|&k| &prep.splats[k]),
                        lit(x as f64),
                        lit(y as f64),
                        Some(&mut chain),
                    );
                    // Color composited behind the current splat.
                    let mut behind = Vector3::zeros();
                    for c in chain.iter().rev() {
                        let s = &prep.splats[list[c.slot]];
                        let a = &mut adj[c.slot];
                        a.color += g * (c.alpha * c.transmittance);
                        let d_alpha = c.transmittance * g.dot(&(s.color - behind));
                        behind = s.color * c.alpha + behind * (T::one() - c.alpha);

                        a.opacity += d_alpha * c.g;
                        let d_g = d_alpha * s.opacity;
                        let [ca, cb, cc] = s.conic;
                        // G = exp(-(½ a dx² + b dx dy + ½ c dy²)), d = pixel − mean.
                        a.mean[0] += d_g * c.g * (ca * c.dx + cb * c.dy);
                        a.mean[1] += d_g * c.g * (cb * c.dx + cc * c.dy);
                        let half = lit::<T>(0.5);
                        a.conic[0] -= d_g * c.g * half * c.dx * c.dx;
                        a.conic[1] -= d_g * c.g * c.dx * c.dy;
                        a.conic[2] -= d_g * c.g * half * c.dy * c.dy;
                    }
                }
            }
            adj
        });

        let mut screen = vec![SplatAdjoint::zero(); prep.splats.len()];
        for (tile, adj) in per_tile.iter().enumerate() {
            for (slot, a) in adj.iter().enumerate() {
                screen[prep.tiles[tile][slot]].add(a);
            }
        }

        let mut grads: Vec<_> = scene
            .gaussians
            .iter()
            .map(|g| GaussianGrad::zeros(g.opacity_sh.len()))
            .collect();
        for (splat, adj) in prep.splats.iter().zip(&screen) {
            let gauss = &scene.gaussians[splat.id];
            let p = prep.projected[splat.id].as_ref().expect("projected splat");
            grads[splat.id] = chain_to_parameters(gauss, p, cam, adj);
        }
        Ok(GaussianGrads { grads })
    }
}

fn chain_to_parameters<T: Scalar>(
    g: &crate::gaussians::Gaussian4D<T>,
    p: &super::Projected<T>,
    cam: &CameraModel<T>,
    adj: &SplatAdjoint<T>,
) -> GaussianGrad<T> {
    let mut out = GaussianGrad::zeros(g.opacity_sh.len());
    let two = lit::<T>(2.0);
    out.color = adj.color;

    // Opacity o = sigmoid(Σ αᵢ Yᵢ(dir)) · tw.
    let d_logit = adj.opacity * p.tw * p.sigma * (T::one() - p.sigma);
    let d_tw = adj.opacity * p.sigma;
    let mut d_dir = Vector3::zeros();
    for (i, a) in g.opacity_sh.iter().enumerate() {
        out.opacity_sh[i] = d_logit * p.sh_basis[i];
        d_dir += p.sh_grad[i] * (d_logit * *a);
    }
    let dir = p.view_dir;
    let mut d_mu_t = (d_dir - dir * dir.dot(&d_dir)) / p.view_dist;

    // Conic Q = Σ₂⁻¹; with symmetric adjoints dL/dΣ₂ = −Q Ḡ Q.
    let gq = Matrix2::new(adj.conic[0], adj.conic[1] / two, adj.conic[1] / two, adj.conic[2]);
    let d_cov2 = -(p.conic * gq * p.conic);

    let w2c = cam.rotation().transpose();
    let d_cov_cam = p.jac.transpose() * d_cov2 * p.jac;
    let d_jac = d_cov2 * p.jac * p.cov_cam * two;
    let d_cov3 = w2c.transpose() * d_cov_cam * w2c;

    // Camera-frame mean through the projected center and the Jacobian.
    let (x, y, z) = (p.xc.x, p.xc.y, p.xc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let [gmx, gmy] = adj.mean;
    let d_xc = Vector3::new(
        gmx * fx / z - d_jac[(0, 2)] * fx / z2,
        gmy * fy / z - d_jac[(1, 2)] * fy / z2,
        -(gmx * fx * x + gmy * fy * y) / z2
            - d_jac[(0, 0)] * fx / z2
            - d_jac[(1, 1)] * fy / z2
            + d_jac[(0, 2)] * two * fx * x / z3
            + d_jac[(1, 2)] * two * fy * y / z3,
    );
    d_mu_t += w2c.transpose() * d_xc;

    // Σ₃ = R diag(s²) Rᵀ.
    let mut d_rot = Matrix3::zeros();
    for k in 0..3 {
        let r_k = p.rot.column(k);
        let m_r = d_cov3 * r_k;
        out.s[k] = two * g.s[k] * r_k.dot(&m_r);
        d_rot.set_column(k, &(m_r * (two * g.s[k] * g.s[k])));
    }
    let d_q_t = rotation_vjp(&p.q_t, &d_rot);

    // Evolution: μ_t = μ + ρ v dt, q_t = exp(ρ ω dt) ⊗ q.
    out.mu = d_mu_t;
    let exp_q = crate::gaussians::quat_exp(&p.theta);
    out.q = left_mul_matrix(&exp_q).transpose() * d_q_t;
    let d_theta = quat_exp_jacobian(&p.theta).transpose() * (right_mul_matrix(&g.q).transpose() * d_q_t);
    let forward = p.dt >= T::zero();
    let (v, w) = if forward { (g.v_fwd, g.w_fwd) } else { (g.v_bwd, g.w_bwd) };
    let d_v = d_mu_t * (g.gate * p.dt);
    let d_w = d_theta * (g.gate * p.dt);
    if forward {
        out.v_fwd = d_v;
        out.w_fwd = d_w;
    } else {
        out.v_bwd = d_v;
        out.w_bwd = d_w;
    }
    out.gate = p.dt * (d_mu_t.dot(&v) + d_theta.dot(&w));

    // Temporal weight tw = exp(−dt² / 2σ²).
    let sigma2 = g.sigma_t * g.sigma_t;
    let d_dt_tw = if sigma2.is_finite_value() {
        -d_tw * p.tw * p.dt / sigma2
    } else {
        T::zero()
    };
    out.sigma_t = if sigma2.is_finite_value() {
        d_tw * p.tw * p.dt * p.dt / (sigma2 * g.sigma_t)
    } else {
        T::zero()
    };
    let d_dt = g.gate * (d_mu_t.dot(&v) + d_theta.dot(&w)) + d_dt_tw;
    out.tau = -d_dt;
    out
}
