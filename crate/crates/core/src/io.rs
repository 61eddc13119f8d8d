//! On-disk scene layout.
//!
//! A scene directory holds `scene.json` (the manifest), 8-bit RGB PNG images
//! and little-endian binary containers:
//!
//! * `G4DF` grids: 16-byte header (magic, u32 width, u32 height, u32
//!   channels) followed by row-major interleaved `f32` values.
//! * `G4DS` Gaussians: 12-byte header (magic, u32 count, u32 sh_order)
//!   followed by one fixed-width `f32` record per Gaussian.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian4D, Scene4D};
use crate::geometry::{CameraModel, DepthMap, Pose};
use crate::image::Image;
use crate::motion::{Direction, FlowField, MotionField};
use crate::scalar::{lit, Scalar};
use crate::sh;

pub const GRID_MAGIC: [u8; 4] = *b"G4DF";
pub const GAUSSIAN_MAGIC: [u8; 4] = *b"G4DS";
pub const MANIFEST_FILE: &str = "scene.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Channel order of a motion grid.
pub const MOTION_CHANNELS: [&str; 9] = ["dx", "dy", "dd", "omega_x", "omega_y", "omega_z", "gate", "sigma_t", "tau"];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_magic(bytes: &[u8], magic: [u8; 4], path: &Path) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f32_payload(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn need_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Dense `f32` grid with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{} values for {width}x{height}x{channels}", width * height * channels),
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(&GRID_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        check_magic(bytes, GRID_MAGIC, path)?;
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: 16,
                found: bytes.len(),
            });
        }
        let (w, h, c) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
        need_len(bytes, 16 + 4 * w * h * c, path)?;
        Self::new(w, h, c, f32_payload(&bytes[16..]))
    }
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_bytes(path, &grid.to_bytes())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    Grid::from_bytes(&read_bytes(path)?, path)
}

fn expect_channels(grid: &Grid, channels: usize, what: &str) -> Result<()> {
    if grid.channels != channels {
        return Err(Error::shape(
            format!("{what} grid with {channels} channels"),
            format!("{} channels", grid.channels),
        ));
    }
    Ok(())
}

/// One channel; invalid pixels are stored as 0.
pub fn depth_to_grid<T: Scalar>(d: &DepthMap<T>) -> Grid {
    let data = d
        .values
        .iter()
        .zip(&d.valid)
        .map(|(v, &ok)| if ok { v.to_f64_lossy() as f32 } else { 0.0 })
        .collect();
    Grid {
        width: d.width,
        height: d.height,
        channels: 1,
        data,
    }
}

pub fn grid_to_depth<T: Scalar>(g: &Grid) -> Result<DepthMap<T>> {
    expect_channels(g, 1, "depth")?;
    DepthMap::from_values(g.width, g.height, g.data.iter().map(|&v| lit(v as f64)).collect())
}

/// Two channels; invalid pixels are stored as NaN.
pub fn flow_to_grid<T: Scalar>(f: &FlowField<T>) -> Grid {
    let mut data = Vec::with_capacity(2 * f.flow.len());
    for (v, &ok) in f.flow.iter().zip(&f.valid) {
        if ok {
            data.push(v.x.to_f64_lossy() as f32);
            data.push(v.y.to_f64_lossy() as f32);
        } else {
            data.extend_from_slice(&[f32::NAN, f32::NAN]);
        }
    }
    Grid {
        width: f.width,
        height: f.height,
        channels: 2,
        data,
    }
}

pub fn grid_to_flow<T: Scalar>(g: &Grid) -> Result<FlowField<T>> {
    expect_channels(g, 2, "flow")?;
    let mut flow = Vec::with_capacity(g.width * g.height);
    let mut valid = Vec::with_capacity(g.width * g.height);
    for px in g.data.chunks_exact(2) {
        let ok = px[0].is_finite() && px[1].is_finite();
        valid.push(ok);
        flow.push(if ok {
            Vector2::new(lit(px[0] as f64), lit(px[1] as f64))
        } else {
            Vector2::zeros()
        });
    }
    Ok(FlowField {
        width: g.width,
        height: g.height,
        flow,
        valid,
    })
}

/// Nine channels in [`MOTION_CHANNELS`] order. The direction is not stored.
pub fn motion_to_grid<T: Scalar>(m: &MotionField<T>) -> Grid {
    let n = m.width * m.height;
    let mut data = Vec::with_capacity(9 * n);
    for i in 0..n {
        let px = [
            m.dx[i], m.dy[i], m.dd[i], m.omega[i].x, m.omega[i].y, m.omega[i].z, m.gate[i], m.sigma_t[i], m.tau[i],
        ];
        data.extend(px.iter().map(|v| v.to_f64_lossy() as f32));
    }
    Grid {
        width: m.width,
        height: m.height,
        channels: 9,
        data,
    }
}

pub fn grid_to_motion<T: Scalar>(g: &Grid, direction: Direction) -> Result<MotionField<T>> {
    expect_channels(g, 9, "motion")?;
    let mut m = MotionField::zeros(g.width, g.height, T::one(), T::one());
    m.direction = direction;
    for (i, px) in g.data.chunks_exact(9).enumerate() {
        let v = |k: usize| lit::<T>(px[k] as f64);
        m.dx[i] = v(0);
        m.dy[i] = v(1);
        m.dd[i] = v(2);
        m.omega[i] = Vector3::new(v(3), v(4), v(5));
        m.gate[i] = v(6);
        m.sigma_t[i] = v(7);
        m.tau[i] = v(8);
    }
    Ok(m)
}

// `f32` values pass through bit-for-bit, NaN payloads included.
fn to_f32<T: Scalar>(v: T) -> f32 {
    v.to_f32().unwrap_or_else(|| v.to_f64_lossy() as f32)
}

fn from_f32<T: Scalar>(v: f32) -> T {
    T::from_f32(v).unwrap_or_else(|| lit(v as f64))
}

/// Gaussians read from a `G4DS` container.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet<T: Scalar> {
    pub sh_order: u32,
    pub gaussians: Vec<Gaussian4D<T>>,
}

/// Number of `f32` values per Gaussian record.
pub fn record_len(sh_order: u32) -> usize {
    29 + sh::coeff_count(sh_order)
}

/// Serializes to `G4DS`. Values are stored as `f32`, so `f64` inputs are
/// rounded; `f32` inputs round-trip bit-exactly.
pub fn encode_gaussians<T: Scalar>(gaussians: &[Gaussian4D<T>], sh_order: u32) -> Result<Vec<u8>> {
    let k = sh::coeff_count(sh_order);
    let mut out = Vec::with_capacity(12 + 4 * record_len(sh_order) * gaussians.len());
    out.extend_from_slice(&GAUSSIAN_MAGIC);
    out.extend_from_slice(&(gaussians.len() as u32).to_le_bytes());
    out.extend_from_slice(&sh_order.to_le_bytes());
    let mut put = |v: T| out.extend_from_slice(&to_f32(v).to_le_bytes());
    for (i, g) in gaussians.iter().enumerate() {
        if g.opacity_sh.len() != k {
            return Err(Error::InvalidGaussian {
                index: i,
                reason: format!("{} opacity coefficients, order {sh_order} needs {k}", g.opacity_sh.len()),
            });
        }
        g.mu.iter().for_each(|&v| put(v));
        [g.q.w, g.q.i, g.q.j, g.q.k].into_iter().for_each(&mut put);
        g.s.iter().for_each(|&v| put(v));
        g.color.iter().for_each(|&v| put(v));
        g.opacity_sh.iter().for_each(|&v| put(v));
        [g.tau, g.lifespan, g.sigma_t].into_iter().for_each(&mut put);
        for v in [&g.v_fwd, &g.v_bwd, &g.w_fwd, &g.w_bwd] {
            v.iter().for_each(|&x| put(x));
        }
        put(g.gate);
    }
    Ok(out)
}

/// Parses a `G4DS` container. With `expected_order` set, a file written at
/// another SH order is rejected.
pub fn decode_gaussians<T: Scalar>(bytes: &[u8], path: &Path, expected_order: Option<u32>) -> Result<GaussianSet<T>> {
    check_magic(bytes, GAUSSIAN_MAGIC, path)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let count = u32_at(bytes, 4) as usize;
    let sh_order = u32_at(bytes, 8);
    if let Some(expected) = expected_order.filter(|&e| e != sh_order) {
        return Err(Error::ShOrderMismatch {
            expected,
            found: sh_order,
        });
    }
    if sh_order > 16 {
        return Err(Error::Validation(vec![format!("{}: implausible sh order {sh_order}", path.display())]));
    }
    let rec = record_len(sh_order);
    need_len(bytes, 12 + 4 * rec * count, path)?;
    let values = f32_payload(&bytes[12..]);
    let k = sh::coeff_count(sh_order);
    let gaussians = values
        .chunks_exact(rec)
        .map(|r| {
            let v = |i: usize| from_f32::<T>(r[i]);
            let v3 = |i: usize| Vector3::new(v(i), v(i + 1), v(i + 2));
            let o = 13 + k;
            Gaussian4D {
                mu: v3(0),
                q: Quaternion::new(v(3), v(4), v(5), v(6)),
                s: v3(7),
                color: v3(10),
                opacity_sh: (13..13 + k).map(v).collect(),
                tau: v(o),
                lifespan: v(o + 1),
                sigma_t: v(o + 2),
                v_fwd: v3(o + 3),
                v_bwd: v3(o + 6),
                w_fwd: v3(o + 9),
                w_bwd: v3(o + 12),
                gate: v(o + 15),
            }
        })
        .collect();
    Ok(GaussianSet { sh_order, gaussians })
}

pub fn write_gaussians<T: Scalar>(path: &Path, scene: &Scene4D<T>) -> Result<()> {
    write_bytes(path, &encode_gaussians(&scene.gaussians, scene.sh_order)?)
}

pub fn read_gaussians<T: Scalar>(path: &Path, expected_order: Option<u32>) -> Result<GaussianSet<T>> {
    decode_gaussians(&read_bytes(path)?, path, expected_order)
}

/// Writes an 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
pub fn write_png<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer size");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| lit::<T>(b as f64 / 255.0)).collect();
    Image::new(w as usize, h as usize, data)
}

/// Camera-to-world pose with a row-major rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Pose<f64>> for PoseEntry {
    fn from(p: &Pose<f64>) -> Self {
        let r = &p.rotation;
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<&PoseEntry> for Pose<f64> {
    fn from(p: &PoseEntry) -> Self {
        let r = &p.rotation;
        Pose::new(
            Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]),
            Vector3::from(p.translation),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: PoseEntry,
}

impl From<&CameraModel<f64>> for CameraEntry {
    fn from(c: &CameraModel<f64>) -> Self {
        Self {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose: (&c.pose).into(),
        }
    }
}

impl CameraEntry {
    pub fn to_camera(&self) -> Result<CameraModel<f64>> {
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, (&self.pose).into(), self.width, self.height)
    }
}

/// Files for one camera at one timestamp, relative to the scene directory.
/// `flow` and `motion` describe motion towards the next frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub camera_count: usize,
    pub frame_count: usize,
    pub sh_order: u32,
    pub timestamps: Vec<f64>,
    pub cameras: Vec<CameraEntry>,
    /// Indexed `[camera][frame]`.
    pub frames: Vec<Vec<FrameEntry>>,
    /// Ground-truth or predicted Gaussians (`G4DS`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussians: Option<String>,
    /// First-pass per-frame pose predictions, `[camera][frame]`. When present,
    /// each chunk's rig pose is the average over its context frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_poses: Option<Vec<Vec<PoseEntry>>>,
    /// Rig poses from a second pass over all frames, one per camera, used to
    /// place the held-out target views.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_pass_poses: Option<Vec<PoseEntry>>,
}

const REQUIRED_KEYS: [&str; 7] = [
    "version",
    "camera_count",
    "frame_count",
    "sh_order",
    "timestamps",
    "cameras",
    "frames",
];

impl SceneManifest {
    /// Parses and validates manifest text, reporting every missing key and
    /// structural inconsistency at once.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let missing: Vec<String> = REQUIRED_KEYS
            .iter()
            .filter(|k| value.get(**k).is_none())
            .map(|k| format!("missing key `{k}`"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        let m: SceneManifest = serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != MANIFEST_VERSION {
            bad.push(format!("unsupported version {} (expected {MANIFEST_VERSION})", self.version));
        }
        if self.cameras.len() != self.camera_count {
            bad.push(format!("camera_count {} but {} cameras listed", self.camera_count, self.cameras.len()));
        }
        if self.timestamps.len() != self.frame_count {
            bad.push(format!("frame_count {} but {} timestamps", self.frame_count, self.timestamps.len()));
        }
        if self.timestamps.windows(2).any(|w| !(w[1] > w[0])) || self.timestamps.iter().any(|t| !t.is_finite()) {
            bad.push("timestamps must be finite and strictly increasing".into());
        }
        if self.frames.len() != self.camera_count {
            bad.push(format!("frames lists {} cameras, expected {}", self.frames.len(), self.camera_count));
        }
        for (c, f) in self.frames.iter().enumerate() {
            if f.len() != self.frame_count {
                bad.push(format!("camera {c} lists {} frames, expected {}", f.len(), self.frame_count));
            }
        }
        for (c, cam) in self.cameras.iter().enumerate() {
            if let Err(e) = cam.to_camera() {
                bad.push(format!("camera {c}: {e}"));
            }
        }
        if let Some(fp) = &self.frame_poses {
            if fp.len() != self.camera_count || fp.iter().any(|f| f.len() != self.frame_count) {
                bad.push("frame_poses must be indexed [camera][frame]".into());
            }
        }
        if let Some(sp) = &self.second_pass_poses {
            if sp.len() != self.camera_count {
                bad.push(format!("second_pass_poses lists {} cameras, expected {}", sp.len(), self.camera_count));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Every file path the manifest references.
    pub fn referenced_files(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.gaussians.iter().map(String::as_str).collect();
        for f in self.frames.iter().flatten() {
            out.push(&f.image);
            out.extend([&f.depth, &f.flow, &f.motion].into_iter().flatten().map(String::as_str));
        }
        out
    }
}

/// A scene directory with a parsed manifest; arrays are loaded on demand.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub root: PathBuf,
    pub manifest: SceneManifest,
}

impl SceneDir {
    /// Parses the manifest without touching the referenced files.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: SceneManifest::from_json(&text, &path)?,
        })
    }

    /// Like [`SceneDir::open`], but fails on the first referenced file that
    /// does not exist.
    pub fn open_checked(root: &Path) -> Result<Self> {
        let dir = Self::open(root)?;
        for f in dir.manifest.referenced_files() {
            let p = dir.root.join(f);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
        Ok(dir)
    }

    pub fn write(root: &Path, manifest: &SceneManifest) -> Result<Self> {
        manifest.validate()?;
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        write_bytes(&path, text.as_bytes())?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: manifest.clone(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cameras(&self) -> Vec<CameraModel<f64>> {
        self.manifest
            .cameras
            .iter()
            .map(|c| c.to_camera().expect("validated on open"))
            .collect()
    }

    fn entry(&self, cam: usize, frame: usize) -> Result<&FrameEntry> {
        self.manifest
            .frames
            .get(cam)
            .and_then(|f| f.get(frame))
            .ok_or_else(|| Error::Validation(vec![format!("no frame {frame} for camera {cam}")]))
    }

    pub fn image(&self, cam: usize, frame: usize) -> Result<Image<f64>> {
        read_png(&self.path(&self.entry(cam, frame)?.image))
    }

    pub fn depth(&self, cam: usize, frame: usize) -> Result<Option<DepthMap<f64>>> {
        match &self.entry(cam, frame)?.depth {
            Some(p) => Ok(Some(grid_to_depth(&read_grid(&self.path(p))?)?)),
            None => Ok(None),
        }
    }

    pub fn flow(&self, cam: usize, frame: usize) -> Result<Option<FlowField<f64>>> {
        match &self.entry(cam, frame)?.flow {
            Some(p) => Ok(Some(grid_to_flow(&read_grid(&self.path(p))?)?)),
            None => Ok(None),
        }
    }

    pub fn motion(&self, cam: usize, frame: usize) -> Result<Option<MotionField<f64>>> {
        match &self.entry(cam, frame)?.motion {
            Some(p) => Ok(Some(grid_to_motion(&read_grid(&self.path(p))?, Direction::Forward)?)),
            None => Ok(None),
        }
    }

    /// Cameras, timestamps and (if referenced) the stored Gaussians.
    pub fn scene(&self) -> Result<Scene4D<f64>> {
        let gaussians = match &self.manifest.gaussians {
            Some(p) => read_gaussians(&self.path(p), Some(self.manifest.sh_order))?.gaussians,
            None => Vec::new(),
        };
        Ok(Scene4D {
            gaussians,
            cameras: self.cameras(),
            timestamps: self.manifest.timestamps.clone(),
            sh_order: self.manifest.sh_order,
        })
    }
}

/// JSON pose list file: `{"poses": [{"rotation": ..., "translation": ...}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub poses: Vec<PoseEntry>,
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: PoseFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(f.poses.iter().map(Pose::from).collect())
}

pub fn write_poses(path: &Path, poses: &[Pose<f64>]) -> Result<()> {
    let f = PoseFile {
        poses: poses.iter().map(PoseEntry::from).collect(),
    };
    let text = serde_json::to_string_pretty(&f).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_bytes(path, text.as_bytes())
}

/// Writes text, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_round_trip_7x5x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..70).map(|_| f32::from_bits(rng.random())).collect();
        let g = Grid::new(7, 5, 2, data).unwrap();
        let back = Grid::from_bytes(&g.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back.width, 7);
        let bits = |g: &Grid| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g), bits(&back));
    }

    #[test]
    fn grid_errors_are_distinct() {
        let g = Grid::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let mut bytes = g.to_bytes();
        assert!(matches!(
            Grid::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::Truncated { expected: 32, found: 31, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Grid::from_bytes(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
        assert!(matches!(read_grid(Path::new("/nonexistent/a.g4df")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn gaussian_order_mismatch() {
        let g = Gaussian4D::<f32>::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.1, Vector3::repeat(0.5), 0.5, 1);
        let bytes = encode_gaussians(std::slice::from_ref(&g), 1).unwrap();
        assert_eq!(bytes.len(), 12 + 4 * 33);
        let back = decode_gaussians::<f32>(&bytes, Path::new("m"), Some(1)).unwrap();
        assert_eq!(back.gaussians, vec![g]);
        assert!(matches!(
            decode_gaussians::<f32>(&bytes, Path::new("m"), Some(0)),
            Err(Error::ShOrderMismatch { expected: 0, found: 1 })
        ));
    }

    #[test]
    fn empty_manifest_lists_missing_keys() {
        match SceneManifest::from_json("{}", Path::new("scene.json")) {
            Err(Error::Validation(v)) => assert_eq!(v.len(), REQUIRED_KEYS.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn depth_and_flow_masks_survive() {
        let d = DepthMap::from_values(2, 1, vec![2.5f64, -1.0]).unwrap();
        let back: DepthMap<f64> = grid_to_depth(&depth_to_grid(&d)).unwrap();
        assert_eq!(back.valid, vec![true, false]);
        let mut f = FlowField::<f64>::zeros(2, 1);
        f.valid[1] = false;
        f.flow[0] = Vector2::new(0.5, -1.0);
        let back: FlowField<f64> = grid_to_flow(&flow_to_grid(&f)).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.png");
        let img = Image::<f64>::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 2.0, -1.0]).unwrap();
        write_png(&p, &img).unwrap();
        let back: Image<f64> = read_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pose_entry_is_row_major() {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let p = Pose::new(r, Vector3::new(1.0, 2.0, 3.0));
        let e = PoseEntry::from(&p);
        assert_eq!(e.rotation[0], [0.0, -1.0, 0.0]);
        assert_eq!(Pose::from(&e), p);
    }
}
