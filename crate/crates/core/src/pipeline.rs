//! Pixel-aligned Gaussians from per-frame data products (image, depth and
//! an optional motion field), the way a feed-forward predictor emits them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::Gaussian4D;
use crate::geometry::{CameraModel, DepthMap};
use crate::image::Image;
use crate::motion::{lift_field, MotionField};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Use every `stride`-th pixel in x and y.
    pub stride: usize,
    /// Splat radius as a multiple of the pixel footprint `d / fx`.
    pub footprint: f64,
    pub opacity: f64,
    pub lifespan: f64,
    /// Temporal std for pixels without a motion field.
    pub sigma_t: f64,
    pub sh_order: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            footprint: 0.8,
            opacity: 0.9,
            lifespan: f64::INFINITY,
            sigma_t: f64::INFINITY,
            sh_order: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.stride == 0 {
            bad.push("stride must be at least 1".to_string());
        }
        if !(self.footprint > 0.0 && self.footprint.is_finite()) {
            bad.push(format!("footprint = {} must be positive", self.footprint));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            bad.push(format!("opacity = {} must lie in (0, 1)", self.opacity));
        }
        if !(self.lifespan > 0.0) {
            bad.push(format!("lifespan = {} must be positive", self.lifespan));
        }
        if !(self.sigma_t > 0.0) {
            bad.push(format!("sigma_t = {} must be positive", self.sigma_t));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// One context frame seen by one camera. `motion` (towards the next frame,
/// `dt` seconds later) is optional; without it the Gaussians are static.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a, T: Scalar> {
    pub camera: &'a CameraModel<T>,
    pub time: T,
    pub image: &'a Image<T>,
    pub depth: &'a DepthMap<T>,
    pub motion: Option<&'a MotionField<T>>,
    pub dt: T,
}

/// One Gaussian per sampled pixel with valid depth, centered on the
/// unprojected point with `tau` at the frame time. The field's shifts and
/// angular rates are taken as observed (already gated) motion: they are
/// divided by the pixel's gate so that evolving the Gaussian reproduces them.
/// Forward and backward slots get the same values.
pub fn gaussians_from_frame<T: Scalar>(frame: &FrameInput<'_, T>, cfg: &PipelineConfig) -> Result<Vec<Gaussian4D<T>>> {
    cfg.validate()?;
    let cam = frame.camera;
    let (w, h) = (cam.width, cam.height);
    for (what, fw, fh) in [
        ("image", frame.image.width, frame.image.height),
        ("depth", frame.depth.width, frame.depth.height),
    ] {
        if fw != w || fh != h {
            return Err(Error::shape(format!("camera {w}x{h}"), format!("{what} {fw}x{fh}")));
        }
    }
    let velocity = frame
        .motion
        .map(|m| lift_field(m, frame.depth, cam, frame.dt))
        .transpose()?;

    let mut out = Vec::new();
    for y in (0..h).step_by(cfg.stride) {
        for x in (0..w).step_by(cfg.stride) {
            let i = y * w + x;
            if !frame.depth.valid[i] {
                continue;
            }
            let d = frame.depth.values[i];
            let (xf, yf) = (lit::<T>(x as f64), lit::<T>(y as f64));
            let color = Vector3::new(frame.image.data[3 * i], frame.image.data[3 * i + 1], frame.image.data[3 * i + 2]);
            let scale = lit::<T>(cfg.footprint * cfg.stride as f64) * d / cam.fx;
            let mut g = Gaussian4D::isotropic(cam.unproject(xf, yf, d), scale, color, lit(cfg.opacity), cfg.sh_order);
            g.tau = frame.time;
            g.lifespan = lit(cfg.lifespan);
            g.sigma_t = lit(cfg.sigma_t);
            if let (Some(m), Some(v)) = (frame.motion, &velocity) {
                if v.valid[i] {
                    let gate = m.gate[i];
                    g.v_fwd = v.velocity[i] / gate;
                    g.v_bwd = g.v_fwd;
                    g.w_fwd = m.omega[i] / gate;
                    g.w_bwd = g.w_fwd;
                    g.gate = gate;
                    g.sigma_t = m.sigma_t[i];
                }
            }
            out.push(g);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    #[test]
    fn one_gaussian_per_valid_pixel() {
        let cam = CameraModel::new(10.0, 10.0, 1.5, 1.0, Pose::identity(), 4, 3).unwrap();
        let img = Image::filled(4, 3, 0.25);
        let mut depth = DepthMap::constant(4, 3, 2.0);
        depth.valid[5] = false;
        let frame = FrameInput {
            camera: &cam,
            time: 0.3,
            image: &img,
            depth: &depth,
            motion: None,
            dt: 0.1,
        };
        let gs = gaussians_from_frame(&frame, &PipelineConfig::default()).unwrap();
        assert_eq!(gs.len(), 11);
        assert_eq!(gs[0].mu, cam.unproject(0.0, 0.0, 2.0));
        assert_eq!(gs[0].tau, 0.3);
        assert!((gs[0].dc_opacity() - 0.9f64).abs() < 1e-12);
    }

    #[test]
    fn motion_field_sets_velocity() {
        let cam = CameraModel::new(10.0, 10.0, 1.0, 1.0, Pose::identity(), 3, 3).unwrap();
        let img = Image::filled(3, 3, 0.5);
        let depth = DepthMap::constant(3, 3, 2.0);
        let mut m = MotionField::zeros(3, 3, 0.5, 2.0);
        m.dx = vec![0.5; 9];
        let frame = FrameInput {
            camera: &cam,
            time: 0.0,
            image: &img,
            depth: &depth,
            motion: Some(&m),
            dt: 0.1,
        };
        let gs = gaussians_from_frame(&frame, &PipelineConfig::default()).unwrap();
        // Center pixel: dx = 0.5 px at depth 2 and fx = 10 is 0.1 m over 0.1 s.
        let (v, _) = gs[4].velocity_at(0.05);
        assert!((v - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((gs[4].v_fwd - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(gs[4].gate, 0.5);
        assert_eq!(gs[4].sigma_t, 2.0);
    }
}
