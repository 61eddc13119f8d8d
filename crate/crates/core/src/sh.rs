//! Real spherical harmonics with the Condon-Shortley phase, evaluated in
//! Cartesian form so that poles need no special casing.
//!
//! Coefficients are ordered by `l² + l + m` for `m = -l..=l`, which matches
//! the usual splatting layout (`Y₀₀`, then `Y₁₋₁, Y₁₀, Y₁₁`, ...).

use nalgebra::Vector3;

use crate::scalar::{lit, Scalar};

/// `Y₀₀ = 1 / (2√π)`.
pub const Y00: f64 = 0.282_094_791_773_878_14;

/// Number of coefficients for order `k`.
pub const fn coeff_count(order: u32) -> usize {
    ((order + 1) * (order + 1)) as usize
}

/// Inverse of [`coeff_count`]; `None` when `n` is not a perfect square.
pub fn order_for_count(n: usize) -> Option<u32> {
    let k = (n as f64).sqrt().round() as usize;
    (k >= 1 && k * k == n).then(|| (k - 1) as u32)
}

fn factorial_ratio(l: u32, m: u32) -> f64 {
    // (l - m)! / (l + m)!
    ((l - m + 1)..=(l + m)).fold(1.0, |acc, i| acc / i as f64)
}

/// Normalization `K_lm` times `√2` for `m ≠ 0`.
fn norm(l: u32, m: u32) -> f64 {
    let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial_ratio(l, m)).sqrt();
    if m == 0 {
        k
    } else {
        std::f64::consts::SQRT_2 * k
    }
}

/// Evaluates all basis functions up to `order` at a unit direction.
pub fn eval_basis<T: Scalar>(order: u32, dir: &Vector3<T>) -> Vec<T> {
    basis_and_gradient(order, dir, false).0
}

/// Basis values and, if requested, their Cartesian gradients treating each
/// `Y_lm` as a polynomial in `(x, y, z)`.
pub(crate) fn basis_and_gradient<T: Scalar>(
    order: u32,
    dir: &Vector3<T>,
    want_grad: bool,
) -> (Vec<T>, Vec<Vector3<T>>) {
    let n = coeff_count(order);
    let mut out = vec![T::zero(); n];
    let mut grad = if want_grad {
        vec![Vector3::zeros(); n]
    } else {
        Vec::new()
    };
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let l_max = order as usize;

    // (x + iy)^m as (re, im) plus d/dx; d/dy follows from i·m·(x+iy)^(m-1).
    let mut re = vec![T::one(); l_max + 1];
    let mut im = vec![T::zero(); l_max + 1];
    for m in 1..=l_max {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }

    for m in 0..=l_max {
        // P̃_l^m(z) = P_l^m(z) / (1 - z²)^(m/2), with the Condon-Shortley phase.
        let mut p_prev2 = T::zero();
        let mut dp_prev2 = T::zero();
        let mut dfact = 1.0;
        for i in 0..m {
            dfact *= (2 * i + 1) as f64;
        }
        let mut p_prev = lit::<T>(if m % 2 == 0 { dfact } else { -dfact });
        let mut dp_prev = T::zero();
        for l in m..=l_max {
            let (p, dp) = if l == m {
                (p_prev, dp_prev)
            } else if l == m + 1 {
                let c = lit::<T>((2 * m + 1) as f64);
                let p = z * c * p_prev;
                let dp = c * (p_prev + z * dp_prev);
                p_prev2 = p_prev;
                dp_prev2 = dp_prev;
                p_prev = p;
                dp_prev = dp;
                (p, dp)
            } else {
                let a = lit::<T>((2 * l - 1) as f64);
                let b = lit::<T>((l + m - 1) as f64);
                let inv = lit::<T>(1.0 / (l - m) as f64);
                let p = (a * z * p_prev - b * p_prev2) * inv;
                let dp = (a * (p_prev + z * dp_prev) - b * dp_prev2) * inv;
                p_prev2 = p_prev;
                dp_prev2 = dp_prev;
                p_prev = p;
                dp_prev = dp;
                (p, dp)
            };
            let k = lit::<T>(norm(l as u32, m as u32));
            let base = l * l + l;
            if m == 0 {
                out[base] = k * p;
                if want_grad {
                    grad[base] = Vector3::new(T::zero(), T::zero(), k * dp);
                }
            } else {
                out[base + m] = k * p * re[m];
                out[base - m] = k * p * im[m];
                if want_grad {
                    let mm = lit::<T>(m as f64);
                    // d(re_m)/dx = m re_{m-1}, d(re_m)/dy = -m im_{m-1}
                    // d(im_m)/dx = m im_{m-1}, d(im_m)/dy =  m re_{m-1}
                    grad[base + m] = Vector3::new(
                        k * p * mm * re[m - 1],
                        -k * p * mm * im[m - 1],
                        k * dp * re[m],
                    );
                    grad[base - m] = Vector3::new(
                        k * p * mm * im[m - 1],
                        k * p * mm * re[m - 1],
                        k * dp * im[m],
                    );
                }
            }
        }
    }
    (out, grad)
}
