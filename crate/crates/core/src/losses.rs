//! Image metrics and the training objectives, as pure functions.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};
use crate::image::Image;
use crate::scalar::{lit, Scalar};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const HUBER_DELTA: f64 = 1.0;

/// Per-term weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub ssim: f64,
    /// Kept for the shape of the reconstruction term; LPIPS is never computed.
    pub lpips: f64,
    pub consis: f64,
    pub flow: f64,
    pub pose: f64,
    pub depth: f64,
    pub normal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            ssim: 0.05,
            lpips: 0.5,
            consis: 0.1,
            flow: 0.02,
            pose: 1.0,
            depth: 0.1,
            normal: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mse", self.mse),
            ("ssim", self.ssim),
            ("lpips", self.lpips),
            ("consis", self.consis),
            ("flow", self.flow),
            ("pose", self.pose),
            ("depth", self.depth),
            ("normal", self.normal),
        ];
        let bad: Vec<_> = all
            .iter()
            .filter(|(_, w)| !(*w >= 0.0))
            .map(|(n, w)| format!("weight {n} = {w} must be non-negative"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Unweighted loss terms. `ssim` is the SSIM loss (typically `1 − SSIM`);
/// `lpips` is `None` when it was not computed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts<T> {
    pub mse: T,
    pub ssim: T,
    pub lpips: Option<T>,
    pub consis: T,
    pub motion: T,
    pub pose: T,
    pub depth: T,
    pub normal: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    /// `(name, weighted value)` in objective order.
    pub terms: Vec<(&'static str, T)>,
    pub lpips_skipped: bool,
}

/// Weighted sum of the reconstruction, motion, depth-consistency and
/// distillation terms.
pub fn total_loss<T: Scalar>(parts: &LossParts<T>, w: &LossWeights) -> LossReport<T> {
    let mut terms = vec![
        ("mse", lit::<T>(w.mse) * parts.mse),
        ("ssim", lit::<T>(w.ssim) * parts.ssim),
    ];
    if let Some(lp) = parts.lpips {
        terms.push(("lpips", lit::<T>(w.lpips) * lp));
    }
    terms.extend([
        ("consis", lit::<T>(w.consis) * parts.consis),
        ("motion", lit::<T>(w.flow) * parts.motion),
        ("pose", lit::<T>(w.pose) * parts.pose),
        ("depth", lit::<T>(w.depth) * parts.depth),
        ("normal", lit::<T>(w.normal) * parts.normal),
    ]);
    let total = terms.iter().fold(T::zero(), |acc, (_, v)| acc + *v);
    LossReport {
        total,
        terms,
        lpips_skipped: parts.lpips.is_none(),
    }
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    a.same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::Empty("image"));
    }
    let sum = a
        .data
        .iter()
        .zip(&b.data)
        .fold(T::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y));
    Ok(sum / lit(a.data.len() as f64))
}

/// Peak signal-to-noise ratio for `[0, 1]` images; `+∞` when identical.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse<T: Scalar>(mse: T) -> T {
    if mse == T::zero() {
        T::infinity()
    } else {
        lit::<T>(10.0) * (T::one() / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Mirror index about the edge samples (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

struct Filter<T> {
    taps: Vec<T>,
    width: usize,
    height: usize,
}

impl<T: Scalar> Filter<T> {
    fn new(width: usize, height: usize) -> Self {
        Self {
            taps: gaussian_window().iter().map(|&v| lit(v)).collect(),
            width,
            height,
        }
    }

    fn pass(&self, src: &[T], horizontal: bool) -> Vec<T> {
        let (w, h) = (self.width, self.height);
        let half = (SSIM_WINDOW / 2) as isize;
        let mut out = vec![T::zero(); w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (k, tap) in self.taps.iter().enumerate() {
                    let off = k as isize - half;
                    let j = if horizontal {
                        y * w + reflect(x as isize + off, w)
                    } else {
                        reflect(y as isize + off, h) * w + x
                    };
                    acc += *tap * src[j];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn pass_adjoint(&self, grad: &[T], horizontal: bool) -> Vec<T> {
        let (w, h) = (self.width, self.height);
        let half = (SSIM_WINDOW / 2) as isize;
        let mut out = vec![T::zero(); w * h];
        for y in 0..h {
            for x in 0..w {
                let g = grad[y * w + x];
                for (k, tap) in self.taps.iter().enumerate() {
                    let off = k as isize - half;
                    let j = if horizontal {
                        y * w + reflect(x as isize + off, w)
                    } else {
                        reflect(y as isize + off, h) * w + x
                    };
                    out[j] += *tap * g;
                }
            }
        }
        out
    }

    fn apply(&self, src: &[T]) -> Vec<T> {
        self.pass(&self.pass(src, true), false)
    }

    fn apply_adjoint(&self, grad: &[T]) -> Vec<T> {
        self.pass_adjoint(&self.pass_adjoint(grad, false), true)
    }
}

fn channel(img: &Image<impl Scalar>, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).map(|v| v.to_f64_lossy()).collect()
}

fn ssim_impl<T: Scalar>(a: &Image<T>, b: &Image<T>, want_grad: bool) -> Result<(T, Option<Image<T>>)> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::Empty("image"));
    }
    let n = w * h;
    let filter = Filter::<T>::new(w, h);
    let (c1, c2) = (lit::<T>(SSIM_C1), lit::<T>(SSIM_C2));
    let two = lit::<T>(2.0);
    let norm = lit::<T>((3 * n) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Image::zeros(w, h));
    for c in 0..3 {
        let x: Vec<T> = channel(a, c).into_iter().map(lit).collect();
        let y: Vec<T> = channel(b, c).into_iter().map(lit).collect();
        let prod = |p: &[T], q: &[T]| p.iter().zip(q).map(|(u, v)| *u * *v).collect::<Vec<_>>();
        let mx = filter.apply(&x);
        let my = filter.apply(&y);
        let exx = filter.apply(&prod(&x, &x));
        let eyy = filter.apply(&prod(&y, &y));
        let exy = filter.apply(&prod(&x, &y));
        let mut d_mx = vec![T::zero(); n];
        let mut d_exx = vec![T::zero(); n];
        let mut d_exy = vec![T::zero(); n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let n1 = two * ux * uy + c1;
            let n2 = two * cxy + c2;
            let d1 = ux * ux + uy * uy + c1;
            let d2 = vx + vy + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let dd = d1 * d2;
                d_mx[i] = (two * uy * n2 - two * uy * n1) / dd - s * (two * ux / d1 - two * ux / d2);
                d_exx[i] = -s / d2;
                d_exy[i] = two * n1 / dd;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = filter.apply_adjoint(&d_mx);
            let gb = filter.apply_adjoint(&d_exx);
            let gc = filter.apply_adjoint(&d_exy);
            for i in 0..n {
                g.data[3 * i + c] = (ga[i] + two * x[i] * gb[i] + y[i] * gc[i]) / norm;
            }
        }
    }
    Ok((total / norm, grad))
}

/// Mean SSIM over pixels and channels: 11×11 Gaussian window (σ = 1.5),
/// reflect padding, `C1 = 0.01²`, `C2 = 0.03²`.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(T, Image<T>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn check_depth_shapes<T: Scalar>(a: &DepthMap<T>, b: &DepthMap<T>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    Ok(())
}

fn masked_mse<T: Scalar>(a: &DepthMap<T>, b: &DepthMap<T>) -> Result<T> {
    check_depth_shapes(a, b)?;
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..a.values.len() {
        if a.valid[i] && b.valid[i] {
            let d = a.values[i] - b.values[i];
            sum += d * d;
            count += 1;
        }
    }
    Ok(if count == 0 {
        T::zero()
    } else {
        sum / lit(count as f64)
    })
}

/// Mean squared difference of rendered and prior depth over pixels valid in both.
pub fn depth_consistency<T: Scalar>(rendered: &DepthMap<T>, prior: &DepthMap<T>) -> Result<T> {
    masked_mse(rendered, prior)
}

/// Mean squared depth error against a teacher.
pub fn depth_distill<T: Scalar>(pred: &DepthMap<T>, teacher: &DepthMap<T>) -> Result<T> {
    masked_mse(pred, teacher)
}

/// Forward-difference depth gradients; the last column (row) repeats the
/// previous difference. Returns `(gx, gy, valid_x, valid_y)`.
pub fn depth_gradient<T: Scalar>(d: &DepthMap<T>) -> (Vec<T>, Vec<T>, Vec<bool>, Vec<bool>) {
    let (w, h) = (d.width, d.height);
    let mut gx = vec![T::zero(); w * h];
    let mut gy = vec![T::zero(); w * h];
    let mut vx = vec![false; w * h];
    let mut vy = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if w > 1 {
                let x0 = x.min(w - 2);
                let (a, b) = (y * w + x0, y * w + x0 + 1);
                gx[i] = d.values[b] - d.values[a];
                vx[i] = d.valid[a] && d.valid[b];
            } else {
                vx[i] = d.valid[i];
            }
            if h > 1 {
                let y0 = y.min(h - 2);
                let (a, b) = (y0 * w + x, (y0 + 1) * w + x);
                gy[i] = d.values[b] - d.values[a];
                vy[i] = d.valid[a] && d.valid[b];
            } else {
                vy[i] = d.valid[i];
            }
        }
    }
    (gx, gy, vx, vy)
}

/// Mean squared error between depth gradients, over both components.
pub fn normal_distill<T: Scalar>(pred: &DepthMap<T>, teacher: &DepthMap<T>) -> Result<T> {
    check_depth_shapes(pred, teacher)?;
    let (px, py, pvx, pvy) = depth_gradient(pred);
    let (tx, ty, tvx, tvy) = depth_gradient(teacher);
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..px.len() {
        if pvx[i] && tvx[i] {
            sum += (px[i] - tx[i]) * (px[i] - tx[i]);
            count += 1;
        }
        if pvy[i] && tvy[i] {
            sum += (py[i] - ty[i]) * (py[i] - ty[i]);
            count += 1;
        }
    }
    Ok(if count == 0 {
        T::zero()
    } else {
        sum / lit(count as f64)
    })
}

pub fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        lit::<T>(0.5) * r * r
    } else {
        delta * (a - lit::<T>(0.5) * delta)
    }
}

/// Residual `(Δt, Δq)` of a predicted pose against a teacher, with the
/// predicted quaternion sign-aligned to the teacher's.
pub fn pose_residual<T: Scalar>(pred: &Pose<T>, teacher: &Pose<T>) -> [T; 7] {
    let qp = pred.quaternion().into_inner().coords;
    let qt = teacher.quaternion().into_inner().coords;
    let qp = if qp.dot(&qt) < T::zero() { -qp } else { qp };
    let dt = pred.translation - teacher.translation;
    // nalgebra stores quaternions as (x, y, z, w); report (w, x, y, z).
    [dt.x, dt.y, dt.z, qp[3] - qt[3], qp[0] - qt[0], qp[1] - qt[1], qp[2] - qt[2]]
}

/// Mean elementwise Huber loss over concatenated pose residuals.
pub fn pose_huber<T: Scalar>(pred: &[Pose<T>], teacher: &[Pose<T>], delta: T) -> Result<T> {
    if pred.len() != teacher.len() {
        return Err(Error::shape(format!("{} teacher poses", pred.len()), teacher.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("pose list"));
    }
    let sum = pred
        .iter()
        .zip(teacher)
        .flat_map(|(p, t)| pose_residual(p, t))
        .fold(T::zero(), |acc, r| acc + huber(r, delta));
    Ok(sum / lit((pred.len() * 7) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};

    fn ramp(w: usize, h: usize, offset: f64) -> DepthMap<f64> {
        let v = (0..w * h).map(|i| 1.0 + 0.1 * (i % w) as f64 + 0.05 * (i / w) as f64 + offset).collect();
        DepthMap::from_values(w, h, v).unwrap()
    }

    fn checker(w: usize, h: usize) -> Image<f64> {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = ((x + y) % 2) as f64;
                data.extend([v, v, v]);
            }
        }
        Image::new(w, h, data).unwrap()
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-5, 8), 5);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(12, 8), 2);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(9, 1), 0);
    }

    #[test]
    fn mse_psnr_basics() {
        let z = Image::<f64>::zeros(4, 3);
        let o = Image::<f64>::filled(4, 3, 1.0);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert_relative_eq!(psnr_from_mse(1e-3), 30.0, epsilon = 1e-12);
        assert!(mse(&z, &Image::zeros(3, 3)).is_err());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = checker(9, 7);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let inv = Image::new(9, 7, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = Image::new(6, 5, (0..90).map(|i| ((i * 37) % 17) as f64 / 17.0).collect()).unwrap();
        let b = Image::new(6, 5, (0..90).map(|i| ((i * 11) % 13) as f64 / 13.0).collect()).unwrap();
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in [0, 7, 44, 89] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn depth_losses() {
        let a = ramp(5, 4, 0.0);
        let b = ramp(5, 4, 0.3);
        assert_eq!(depth_consistency(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(depth_consistency(&a, &b).unwrap(), 0.09, epsilon = 1e-12);
        assert!(depth_distill(&a, &b).unwrap() > 0.0);
        assert_relative_eq!(normal_distill(&a, &b).unwrap(), 0.0, epsilon = 1e-24);
    }

    #[test]
    fn depth_gradient_replicates_last_difference() {
        let a = ramp(4, 3, 0.0);
        let (gx, gy, _, _) = depth_gradient(&a);
        assert!(gx.iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(gy.iter().all(|v| (v - 0.05).abs() < 1e-12));
    }

    #[test]
    fn huber_zones() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        let p = Pose::from_quaternion(&UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let flipped = p;
        assert_eq!(pose_huber(&[p], &[flipped], 1.0).unwrap(), 0.0);
        let moved = Pose::new(p.rotation, p.translation + Vector3::new(0.4, -3.0, 0.0));
        // Residuals 0.4 (quadratic), -3.0 (linear), rest 0.
        let expect = (0.5 * 0.16 + (3.0 - 0.5)) / 7.0;
        assert_relative_eq!(pose_huber(&[moved], &[p], 1.0).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        let zero = LossParts::<f64>::default();
        assert_eq!(total_loss(&zero, &w).total, 0.0);
        let single = LossParts { consis: 2.0, ..zero };
        assert_relative_eq!(total_loss(&single, &w).total, 0.2, epsilon = 1e-15);
        let r = total_loss(&zero, &w);
        assert!(r.lpips_skipped);
        assert!(r.terms.iter().all(|(n, _)| *n != "lpips"));
    }
}
