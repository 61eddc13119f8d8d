//! Decomposed motion: per-pixel image-plane shifts plus a depth change, lifted
//! to world-space velocity through the camera, and the flow-supervised
//! motion loss.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, DepthMap};
use crate::scalar::{lit, Scalar};

/// Smallest displaced depth accepted when inverting a velocity.
pub const DISPLACED_DEPTH_EPS: f64 = 1e-8;

/// Default flow magnitude (px) above which pixels are supervised.
pub const FLOW_THRESHOLD_PX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

/// Image-plane shift and depth change of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelShift<T> {
    pub dx: T,
    pub dy: T,
    pub dd: T,
}

impl<T: Scalar> PixelShift<T> {
    pub fn new(dx: T, dy: T, dd: T) -> Self {
        Self { dx, dy, dd }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }
}

/// Per-pixel motion-head outputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<T>,
    pub dy: Vec<T>,
    pub dd: Vec<T>,
    pub omega: Vec<Vector3<T>>,
    pub gate: Vec<T>,
    pub sigma_t: Vec<T>,
    pub tau: Vec<T>,
    pub direction: Direction,
}

impl<T: Scalar> MotionField<T> {
    /// All-static field: zero shifts, gate and temporal std set to the given values.
    pub fn zeros(width: usize, height: usize, gate: T, sigma_t: T) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![T::zero(); n],
            dy: vec![T::zero(); n],
            dd: vec![T::zero(); n],
            omega: vec![Vector3::zeros(); n],
            gate: vec![gate; n],
            sigma_t: vec![sigma_t; n],
            tau: vec![T::zero(); n],
            direction: Direction::Forward,
        }
    }

    pub fn shift(&self, i: usize) -> PixelShift<T> {
        PixelShift::new(self.dx[i], self.dy[i], self.dd[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        let lens = [
            self.dx.len(),
            self.dy.len(),
            self.dd.len(),
            self.omega.len(),
            self.gate.len(),
            self.sigma_t.len(),
            self.tau.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape(format!("{n} entries per channel"), format!("{lens:?}")));
        }
        let (w, h) = (lit::<T>(self.width as f64), lit::<T>(self.height as f64));
        let mut problems = Vec::new();
        if self.dx.iter().any(|v| !(v.abs() < w)) || self.dy.iter().any(|v| !(v.abs() < h)) {
            problems.push("pixel shifts must satisfy |dx| < W and |dy| < H".to_string());
        }
        if self.gate.iter().any(|&g| !(g > T::zero() && g <= T::one())) {
            problems.push("gate must lie in (0, 1]".to_string());
        }
        if self.sigma_t.iter().any(|&s| !(s > T::zero())) {
            problems.push("sigma_t must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Pseudo ground-truth optical flow with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vector2<T>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![Vector2::zeros(); width * height],
            valid: vec![true; width * height],
        }
    }
}

/// World-space velocity of the point at pixel `(x, y)`, depth `d`, that moves
/// to `(x + dx, y + dy)` at depth `d + dd` over `dt` seconds.
pub fn lift_velocity<T: Scalar>(
    cam: &CameraModel<T>,
    x: T,
    y: T,
    d: T,
    shift: PixelShift<T>,
    dt: T,
) -> Result<Vector3<T>> {
    if dt == T::zero() {
        return Err(Error::ZeroTimeStep);
    }
    let d2 = d + shift.dd;
    if !(d2 > T::zero()) {
        return Err(Error::NegativeDisplacedDepth {
            depth: d2.to_f64_lossy(),
        });
    }
    // ((x + dx - cx)·d2 − (x − cx)·d) / fx, rearranged so a zero shift
    // gives exactly zero.
    let delta = Vector3::new(
        (shift.dx * d2 + (x - cam.cx) * shift.dd) / cam.fx,
        (shift.dy * d2 + (y - cam.cy) * shift.dd) / cam.fy,
        shift.dd,
    );
    Ok(cam.rotation() * delta / dt)
}

/// Exact inverse of [`lift_velocity`]: the pixel shift and depth change that
/// a world velocity `v` induces over `dt` at pixel `(x, y)`, depth `d`.
pub fn project_velocity<T: Scalar>(
    cam: &CameraModel<T>,
    v: &Vector3<T>,
    x: T,
    y: T,
    d: T,
    dt: T,
) -> Result<PixelShift<T>> {
    let delta = cam.rotation().transpose() * v * dt;
    let d2 = d + delta.z;
    if !(d2 > lit(DISPLACED_DEPTH_EPS)) {
        return Err(Error::DegenerateInverse {
            depth: d2.to_f64_lossy(),
        });
    }
    let dx = (cam.fx * delta.x - (x - cam.cx) * delta.z) / d2;
    let dy = (cam.fy * delta.y - (y - cam.cy) * delta.z) / d2;
    Ok(PixelShift::new(dx, dy, delta.z))
}

/// Per-pixel world velocities with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub velocity: Vec<Vector3<T>>,
    pub valid: Vec<bool>,
}

/// Applies [`lift_velocity`] at every pixel. Pixels with invalid depth, or
/// whose displaced depth is not positive, get zero velocity and are marked
/// invalid.
pub fn lift_field<T: Scalar>(
    mf: &MotionField<T>,
    depth: &DepthMap<T>,
    cam: &CameraModel<T>,
    dt: T,
) -> Result<VelocityField<T>> {
    if dt == T::zero() {
        return Err(Error::ZeroTimeStep);
    }
    mf.validate()?;
    for (what, w, h) in [("motion field", mf.width, mf.height), ("depth map", depth.width, depth.height)] {
        if w != cam.width || h != cam.height {
            return Err(Error::shape(
                format!("camera {}x{}", cam.width, cam.height),
                format!("{what} {w}x{h}"),
            ));
        }
    }
    let dt = match mf.direction {
        Direction::Forward => dt.abs(),
        Direction::Backward => -dt.abs(),
    };
    let n = mf.width * mf.height;
    let mut velocity = vec![Vector3::zeros(); n];
    let mut valid = vec![false; n];
    for i in 0..n {
        let Some(d) = depth.valid[i].then(|| depth.values[i]) else {
            continue;
        };
        let (x, y) = (lit::<T>((i % mf.width) as f64), lit::<T>((i / mf.width) as f64));
        if let Ok(v) = lift_velocity(cam, x, y, d, mf.shift(i), dt) {
            velocity[i] = v;
            valid[i] = true;
        }
    }
    Ok(VelocityField {
        width: mf.width,
        height: mf.height,
        velocity,
        valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionLoss<T> {
    /// Mean L1 shift error over supervised pixels; zero when there are none.
    pub value: T,
    /// Number of supervised pixels.
    pub count: usize,
}

/// Mean L1 distance between predicted shifts and flow over valid pixels whose
/// flow magnitude strictly exceeds `threshold`.
pub fn motion_loss<T: Scalar>(mf: &MotionField<T>, flow: &FlowField<T>, threshold: T) -> Result<MotionLoss<T>> {
    if mf.width != flow.width || mf.height != flow.height {
        return Err(Error::shape(
            format!("motion field {}x{}", mf.width, mf.height),
            format!("flow {}x{}", flow.width, flow.height),
        ));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (i, f) in flow.flow.iter().enumerate() {
        if !flow.valid[i] || !(f.norm() > threshold) {
            continue;
        }
        sum += (mf.dx[i] - f.x).abs() + (mf.dy[i] - f.y).abs();
        count += 1;
    }
    let value = if count == 0 {
        T::zero()
    } else {
        sum / lit(count as f64)
    };
    Ok(MotionLoss { value, count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn cam() -> CameraModel<f64> {
        let r = UnitQuaternion::from_euler_angles(0.2, -0.4, 0.9);
        CameraModel::new(80.0, 90.0, 20.0, 15.0, Pose::from_quaternion(&r, Vector3::new(1.0, 0.0, 2.0)), 40, 30).unwrap()
    }

    #[test]
    fn static_pixel_has_zero_velocity() {
        let v = lift_velocity(&cam(), 3.0, 4.0, 2.0, PixelShift::zero(), 0.1).unwrap();
        assert_eq!(v, Vector3::zeros());
    }

    #[test]
    fn depth_change_on_principal_ray() {
        let c = CameraModel::new(80.0, 90.0, 20.0, 15.0, Pose::identity(), 40, 30).unwrap();
        let v = lift_velocity(&c, c.cx, c.cy, 2.0, PixelShift::new(0.0, 0.0, 0.3), 0.5).unwrap();
        assert_relative_eq!(v, Vector3::new(0.0, 0.0, 0.6), epsilon = 1e-15);
        let s = project_velocity(&c, &Vector3::new(0.0, 0.0, 0.6), c.cx, c.cy, 2.0, 0.5).unwrap();
        assert_eq!((s.dx, s.dy), (0.0, 0.0));
    }

    #[test]
    fn lift_errors() {
        let c = cam();
        assert!(matches!(
            lift_velocity(&c, 1.0, 1.0, 1.0, PixelShift::new(0.0, 0.0, -1.0), 1.0),
            Err(Error::NegativeDisplacedDepth { .. })
        ));
        assert!(matches!(
            lift_velocity(&c, 1.0, 1.0, 1.0, PixelShift::zero(), 0.0),
            Err(Error::ZeroTimeStep)
        ));
        let back = c.rotation() * Vector3::new(0.0, 0.0, -10.0);
        assert!(matches!(
            project_velocity(&c, &back, 1.0, 1.0, 1.0, 0.1),
            Err(Error::DegenerateInverse { .. })
        ));
    }

    #[test]
    fn zero_velocity_projects_to_zero_shift() {
        let s = project_velocity(&cam(), &Vector3::zeros(), 5.0, 6.0, 3.0, 0.2).unwrap();
        assert_eq!(s, PixelShift::zero());
    }

    #[test]
    fn halving_dt_doubles_velocity() {
        let c = cam();
        let s = PixelShift::new(1.5, -0.5, 0.2);
        let a = lift_velocity(&c, 3.0, 4.0, 2.0, s, 0.2).unwrap();
        let b = lift_velocity(&c, 3.0, 4.0, 2.0, s, 0.1).unwrap();
        assert_eq!(b, a * 2.0);
    }

    #[test]
    fn loss_hand_cases() {
        let (w, h) = (4, 1);
        let mut mf = MotionField::zeros(w, h, 0.5, 1.0);
        let mut flow = FlowField::zeros(w, h);
        flow.flow = vec![
            Vector2::new(3.0, 0.0),
            Vector2::new(0.0, -4.0),
            Vector2::new(2.5, 2.5),
            Vector2::new(1.0, 1.0),
        ];
        mf.dx = vec![2.0, 0.0, 1.0, 0.0];
        mf.dy = vec![0.0, -2.0, 1.0, 0.0];
        let l = motion_loss(&mf, &flow, 2.0).unwrap();
        assert_eq!(l.count, 3);
        assert_eq!(l.value, 2.0);

        let small = FlowField {
            flow: vec![Vector2::new(2.0, 0.0), Vector2::new(1.2, 1.6), Vector2::zeros(), Vector2::new(0.0, -2.0)],
            ..flow.clone()
        };
        let l = motion_loss(&mf, &small, 2.0).unwrap();
        assert_eq!((l.value, l.count), (0.0, 0));

        let mut invalid = flow.clone();
        invalid.valid[0] = false;
        assert_eq!(motion_loss(&mf, &invalid, 2.0).unwrap().count, 2);
    }

    #[test]
    fn lift_field_marks_invalid_depth() {
        let c = CameraModel::new(10.0, 10.0, 1.0, 0.5, Pose::identity(), 3, 2).unwrap();
        let mut mf = MotionField::zeros(3, 2, 1.0, 1.0);
        mf.dd = vec![0.1; 6];
        let depth = DepthMap::from_values(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let vf = lift_field(&mf, &depth, &c, 0.1).unwrap();
        assert_eq!(vf.valid, vec![true, false, true, true, true, true]);
        assert_eq!(vf.velocity[1], Vector3::zeros());
        assert_relative_eq!(vf.velocity[0].z, 1.0, epsilon = 1e-12);

        mf.direction = Direction::Backward;
        let vb = lift_field(&mf, &depth, &c, 0.1).unwrap();
        assert_relative_eq!(vb.velocity[0].z, -1.0, epsilon = 1e-12);
    }
}
