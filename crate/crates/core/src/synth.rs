//! Synthetic rigs with known motion: Gaussians in a unit box seen by a ring
//! of static cameras, with rendered images and depth plus exact flow.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian4D, Scene4D};
use crate::geometry::{CameraModel, DepthMap, Pose};
use crate::image::Image;
use crate::io::{self, CameraEntry, FrameEntry, SceneDir, SceneManifest, MANIFEST_VERSION};
use crate::motion::{project_velocity, FlowField, MotionField};
use crate::rasterizer::Rasterizer;
use crate::sh;

/// Minimum share of a pixel's compositing weight for flow to be defined.
pub const DOMINANT_SHARE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Static,
    ConstantVelocity,
    /// Tangential velocity about the world y axis with a matching spin,
    /// `velocity_range` rad/s. Motion is first order, so paths are straight.
    Orbit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_gaussians: usize,
    pub n_cameras: usize,
    pub n_frames: usize,
    pub ring_radius: f64,
    /// Camera height above the box center, m.
    pub ring_height: f64,
    pub frame_interval: f64,
    pub motion: MotionModel,
    /// Per-axis bound of linear velocities (m/s), or the orbit rate (rad/s).
    pub velocity_range: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub sh_order: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_gaussians: 8,
            n_cameras: 4,
            n_frames: 6,
            ring_radius: 2.5,
            ring_height: 0.8,
            frame_interval: 0.1,
            motion: MotionModel::ConstantVelocity,
            velocity_range: 0.5,
            seed: 0,
            width: 64,
            height: 64,
            fov_deg: 50.0,
            sh_order: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, n) in [
            ("n_gaussians", self.n_gaussians),
            ("n_cameras", self.n_cameras),
            ("n_frames", self.n_frames),
            ("width", self.width),
            ("height", self.height),
        ] {
            if n == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            bad.push(format!("frame_interval = {} must be positive", self.frame_interval));
        }
        // The unit box must stay in front of every camera.
        if !(self.ring_radius.hypot(self.ring_height) > 1.0 && self.ring_radius.is_finite()) {
            bad.push(format!("ring_radius = {} puts cameras inside the scene box", self.ring_radius));
        }
        if !self.ring_height.is_finite() {
            bad.push("ring_height must be finite".into());
        }
        if !(self.velocity_range >= 0.0 && self.velocity_range.is_finite()) {
            bad.push(format!("velocity_range = {} must be non-negative", self.velocity_range));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            bad.push(format!("fov_deg = {} must lie in (0, 180)", self.fov_deg));
        }
        if self.sh_order > 4 {
            bad.push(format!("sh_order = {} must be at most 4", self.sh_order));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.n_frames).map(|k| k as f64 * self.frame_interval).collect()
    }
}

/// `n` cameras evenly spaced on a horizontal circle, all looking at `target`
/// with world `-y` as image down.
#[allow(clippy::too_many_arguments)]
pub fn orbit_cameras(
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    n: usize,
    phase: f64,
    fov_deg: f64,
    width: usize,
    height_px: usize,
) -> Result<Vec<CameraModel<f64>>> {
    (0..n)
        .map(|c| {
            let a = phase + 2.0 * PI * c as f64 / n as f64;
            let eye = target + Vector3::new(radius * a.cos(), height, radius * a.sin());
            let pose = Pose::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0));
            CameraModel::with_fov(fov_deg.to_radians(), pose, width, height_px)
        })
        .collect()
}

/// Data products of one camera at one timestamp. `flow` and `motion` point
/// to the next frame and are absent for the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub image: Image<f64>,
    pub depth: DepthMap<f64>,
    pub flow: Option<FlowField<f64>>,
    pub motion: Option<MotionField<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    /// Ground truth, including cameras and timestamps.
    pub scene: Scene4D<f64>,
    /// Indexed `[camera][frame]`.
    pub frames: Vec<Vec<SynthFrame>>,
}

fn random_gaussian(rng: &mut ChaCha8Rng, spec: &SynthSpec, tau: f64, lifespan: f64, sigma_t: f64) -> Gaussian4D<f64> {
    let mut u3 = |lo: f64, hi: f64| Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi));
    let mu = u3(-0.5, 0.5);
    let s = u3(0.04, 0.1);
    let color = u3(0.1, 0.9);
    let q = loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            break q / n;
        }
    };
    let opacity = rng.random_range(0.6..0.95);
    let mut g = Gaussian4D::isotropic(mu, 0.0, color, opacity, spec.sh_order);
    g.s = s;
    g.q = q;
    g.tau = tau;
    g.lifespan = lifespan;
    g.sigma_t = sigma_t;
    let r = spec.velocity_range;
    match spec.motion {
        MotionModel::Static => {}
        MotionModel::ConstantVelocity => {
            let v = if r > 0.0 {
                Vector3::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r))
            } else {
                Vector3::zeros()
            };
            g.v_fwd = v;
            g.v_bwd = v;
        }
        MotionModel::Orbit => {
            let omega = Vector3::new(0.0, r, 0.0);
            let v = omega.cross(&mu);
            g.v_fwd = v;
            g.v_bwd = v;
            g.w_fwd = omega;
            g.w_bwd = omega;
        }
    }
    debug_assert_eq!(g.opacity_sh.len(), sh::coeff_count(spec.sh_order));
    g
}

/// Flow and motion towards the next frame at pixels one Gaussian dominates.
fn exact_motion(
    rast: &Rasterizer,
    scene: &Scene4D<f64>,
    cam: &CameraModel<f64>,
    t: f64,
    dt: f64,
    depth: &DepthMap<f64>,
    default_sigma: f64,
) -> (FlowField<f64>, MotionField<f64>) {
    let (w, h) = (cam.width, cam.height);
    let mut flow = FlowField::zeros(w, h);
    flow.valid.iter_mut().for_each(|v| *v = false);
    let mut mf = MotionField::zeros(w, h, 1.0, default_sigma);
    for (i, dom) in rast.dominant(scene, cam, t).into_iter().enumerate() {
        let (Some(dom), Some(d)) = (dom, depth.valid[i].then(|| depth.values[i])) else {
            continue;
        };
        if !(dom.share > DOMINANT_SHARE) {
            continue;
        }
        let g = &scene.gaussians[dom.id];
        let (v, omega) = g.velocity_at(t + 0.5 * dt - g.tau);
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let Ok(shift) = project_velocity(cam, &v, x, y, d, dt) else {
            continue;
        };
        flow.flow[i] = Vector2::new(shift.dx, shift.dy);
        flow.valid[i] = true;
        mf.dx[i] = shift.dx;
        mf.dy[i] = shift.dy;
        mf.dd[i] = shift.dd;
        mf.omega[i] = omega;
        mf.gate[i] = g.gate;
        mf.sigma_t[i] = g.sigma_t;
        mf.tau[i] = g.tau;
    }
    (flow, mf)
}

/// Builds the ground-truth scene and renders every camera at every frame.
/// The same spec always yields identical output.
pub fn generate(spec: &SynthSpec, rast: &Rasterizer) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let timestamps = spec.timestamps();
    let span = timestamps[timestamps.len() - 1] - timestamps[0];
    let tau = timestamps[0] + 0.5 * span;
    let lifespan = 2.0 * (span + spec.frame_interval);
    let sigma_t = 10.0 * (span + spec.frame_interval);

    let cameras = orbit_cameras(
        Vector3::zeros(),
        spec.ring_radius,
        spec.ring_height,
        spec.n_cameras,
        0.0,
        spec.fov_deg,
        spec.width,
        spec.height,
    )?;
    let gaussians = (0..spec.n_gaussians)
        .map(|_| random_gaussian(&mut rng, spec, tau, lifespan, sigma_t))
        .collect();
    let scene = Scene4D {
        gaussians,
        cameras,
        timestamps,
        sh_order: spec.sh_order,
    };
    scene.validate()?;

    let mut frames = Vec::with_capacity(spec.n_cameras);
    for cam in &scene.cameras {
        let mut per_cam = Vec::with_capacity(spec.n_frames);
        for (k, &t) in scene.timestamps.iter().enumerate() {
            let frame = rast.render(&scene, cam, t);
            let depth = DepthMap::from_values(cam.width, cam.height, frame.expected_depth())?;
            let (flow, motion) = if k + 1 < scene.timestamps.len() {
                let dt = scene.timestamps[k + 1] - t;
                let (f, m) = exact_motion(rast, &scene, cam, t, dt, &depth, sigma_t);
                (Some(f), Some(m))
            } else {
                (None, None)
            };
            per_cam.push(SynthFrame {
                image: frame.color,
                depth,
                flow,
                motion,
            });
        }
        frames.push(per_cam);
    }
    Ok(SynthScene {
        spec: spec.clone(),
        scene,
        frames,
    })
}

impl SynthScene {
    /// Writes the scene directory: manifest, PNG images, depth/flow/motion
    /// grids and the ground-truth Gaussians.
    pub fn write(&self, dir: &Path) -> Result<SceneDir> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for (c, per_cam) in self.frames.iter().enumerate() {
            let mut entries = Vec::with_capacity(per_cam.len());
            for (k, f) in per_cam.iter().enumerate() {
                let stem = format!("c{c:02}_f{k:04}");
                let entry = FrameEntry {
                    image: format!("images/{stem}.png"),
                    depth: Some(format!("depth/{stem}.g4df")),
                    flow: f.flow.as_ref().map(|_| format!("flow/{stem}.g4df")),
                    motion: f.motion.as_ref().map(|_| format!("motion/{stem}.g4df")),
                };
                io::write_png(&dir.join(&entry.image), &f.image)?;
                io::write_grid(&dir.join(entry.depth.as_ref().expect("set above")), &io::depth_to_grid(&f.depth))?;
                if let (Some(p), Some(flow)) = (&entry.flow, &f.flow) {
                    io::write_grid(&dir.join(p), &io::flow_to_grid(flow))?;
                }
                if let (Some(p), Some(m)) = (&entry.motion, &f.motion) {
                    io::write_grid(&dir.join(p), &io::motion_to_grid(m))?;
                }
                entries.push(entry);
            }
            frames.push(entries);
        }
        let gaussians = "gaussians.g4ds".to_string();
        io::write_gaussians(&dir.join(&gaussians), &self.scene)?;
        let manifest = SceneManifest {
            version: MANIFEST_VERSION,
            camera_count: self.scene.cameras.len(),
            frame_count: self.scene.timestamps.len(),
            sh_order: self.scene.sh_order,
            timestamps: self.scene.timestamps.clone(),
            cameras: self.scene.cameras.iter().map(CameraEntry::from).collect(),
            frames,
            gaussians: Some(gaussians),
            frame_poses: None,
            second_pass_poses: None,
        };
        SceneDir::write(dir, &manifest)
    }
}
