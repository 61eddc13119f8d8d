//! Chunked evaluation: disjoint 5-frame windows, four context frames and the
//! held-out middle frame as target, plus the motion-supervision self-check.

use std::fmt::Write as _;

use crate::alignment::align_target_poses;
use crate::error::{Error, Result};
use crate::gaussians::Scene4D;
use crate::geometry::{average_rig_poses, Pose};
use crate::io::SceneDir;
use crate::losses::{pose_huber, psnr_from_mse, ssim, HUBER_DELTA};
use crate::motion::{lift_velocity, motion_loss, project_velocity, FLOW_THRESHOLD_PX};
use crate::pipeline::{gaussians_from_frame, FrameInput, PipelineConfig};
use crate::rasterizer::Rasterizer;

pub const CHUNK_LEN: usize = 5;
/// Position of the held-out frame inside a chunk.
pub const TARGET_OFFSET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub ordinal: usize,
    pub context: [usize; 4],
    pub target: usize,
}

/// Non-overlapping windows starting at frame 0, at most `cap` of them.
pub fn make_chunks(frame_count: usize, cap: usize) -> Vec<Chunk> {
    (0..frame_count / CHUNK_LEN)
        .take(cap)
        .map(|k| {
            let s = k * CHUNK_LEN;
            Chunk {
                ordinal: k,
                context: [s, s + 1, s + 3, s + 4],
                target: s + TARGET_OFFSET,
            }
        })
        .collect()
}

/// Where the evaluated Gaussians come from.
#[derive(Debug, Clone)]
pub enum GaussianSource {
    /// The Gaussians referenced by the manifest, used for every chunk.
    Manifest,
    /// A fixed set, used for every chunk.
    Fixed(Scene4D<f64>),
    /// Rebuilt per chunk from the context frames' depth, image and motion.
    Pipeline(PipelineConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowLevel {
    Camera,
    Chunk,
    Aggregate,
}

impl RowLevel {
    fn name(self) -> &'static str {
        match self {
            RowLevel::Camera => "camera",
            RowLevel::Chunk => "chunk",
            RowLevel::Aggregate => "aggregate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub level: RowLevel,
    pub chunk: Option<usize>,
    pub camera: Option<usize>,
    pub target_frame: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    /// Pose Huber loss of the per-frame first-pass poses against the rig.
    pub pose_frame: Option<f64>,
    /// Same, for the rig-averaged first-pass poses.
    pub pose_rig: Option<f64>,
    pub error: Option<String>,
}

impl EvalRow {
    fn failed(level: RowLevel, chunk: usize, camera: Option<usize>, target: usize, msg: String) -> Self {
        Self {
            level,
            chunk: Some(chunk),
            camera,
            target_frame: Some(target),
            psnr: f64::NAN,
            ssim: f64::NAN,
            pose_frame: None,
            pose_rig: None,
            error: Some(msg),
        }
    }
}

/// Rows ordered by chunk, then camera; each chunk row follows its camera
/// rows and the aggregate row comes last.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn fmt_opt(v: Option<impl std::fmt::Display>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.level == RowLevel::Chunk && r.error.is_some()).count()
    }

    pub fn rows_at(&self, level: RowLevel) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.level == level)
    }

    pub fn aggregate(&self) -> Option<&EvalRow> {
        self.rows_at(RowLevel::Aggregate).next()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,chunk,camera,target_frame,psnr,ssim,pose_frame,pose_rig,status\n");
        for r in &self.rows {
            let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("error: {}", e.replace([',', '\n'], ";")));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.level.name(),
                fmt_opt(r.chunk),
                fmt_opt(r.camera),
                fmt_opt(r.target_frame),
                r.psnr,
                r.ssim,
                fmt_opt(r.pose_frame),
                fmt_opt(r.pose_rig),
                status
            );
        }
        out
    }

    /// Chunk and aggregate rows as an aligned text table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>6} {:>7} {:>10} {:>8}  {}\n", "level", "chunk", "target", "psnr", "ssim", "status");
        for r in self.rows.iter().filter(|r| r.level != RowLevel::Camera) {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>7} {:>10.3} {:>8.5}  {}",
                r.level.name(),
                fmt_opt(r.chunk),
                fmt_opt(r.target_frame),
                r.psnr,
                r.ssim,
                r.error.as_deref().unwrap_or("ok")
            );
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Rig poses plus the (per-frame, rig-averaged) pose losses when available.
type FirstPass = (Vec<Pose<f64>>, Option<(f64, f64)>);

/// First-pass rig pose per camera: the average of the per-frame predictions
/// over the context frames when present, else the manifest camera pose.
fn first_pass_poses(dir: &SceneDir, chunk: &Chunk) -> Result<FirstPass> {
    let rig: Vec<Pose<f64>> = dir.cameras().iter().map(|c| c.pose).collect();
    let Some(frame_poses) = &dir.manifest.frame_poses else {
        return Ok((rig, None));
    };
    let mut averaged = Vec::with_capacity(rig.len());
    let mut per_frame = Vec::new();
    let mut per_frame_teacher = Vec::new();
    for (c, fp) in frame_poses.iter().enumerate() {
        let ctx: Vec<Pose<f64>> = chunk.context.iter().map(|&f| Pose::from(&fp[f])).collect();
        averaged.push(average_rig_poses(&ctx)?);
        per_frame.extend_from_slice(&ctx);
        per_frame_teacher.extend(std::iter::repeat_n(rig[c], ctx.len()));
    }
    let delta = HUBER_DELTA;
    let losses = (
        pose_huber(&per_frame, &per_frame_teacher, delta)?,
        pose_huber(&averaged, &rig, delta)?,
    );
    Ok((averaged, Some(losses)))
}

fn chunk_gaussians(dir: &SceneDir, chunk: &Chunk, source: &GaussianSource, base: &Scene4D<f64>) -> Result<Scene4D<f64>> {
    match source {
        GaussianSource::Manifest => Ok(base.clone()),
        GaussianSource::Fixed(s) => Ok(Scene4D {
            gaussians: s.gaussians.clone(),
            sh_order: s.sh_order,
            ..base.clone()
        }),
        GaussianSource::Pipeline(cfg) => {
            let mut gaussians = Vec::new();
            let ts = &dir.manifest.timestamps;
            for (c, cam) in base.cameras.iter().enumerate() {
                for &f in &chunk.context {
                    let image = dir.image(c, f)?;
                    let depth = dir
                        .depth(c, f)?
                        .ok_or_else(|| Error::Validation(vec![format!("camera {c} frame {f} has no depth")]))?;
                    let motion = dir.motion(c, f)?;
                    let dt = ts.get(f + 1).map_or(1.0, |t1| t1 - ts[f]);
                    gaussians.extend(gaussians_from_frame(
                        &FrameInput {
                            camera: cam,
                            time: ts[f],
                            image: &image,
                            depth: &depth,
                            motion: motion.as_ref(),
                            dt,
                        },
                        cfg,
                    )?);
                }
            }
            Ok(Scene4D {
                gaussians,
                sh_order: cfg.sh_order,
                ..base.clone()
            })
        }
    }
}

fn evaluate_chunk(
    dir: &SceneDir,
    chunk: &Chunk,
    source: &GaussianSource,
    base: &Scene4D<f64>,
    rast: &Rasterizer,
) -> Result<Vec<EvalRow>> {
    let (pass1, pose_losses) = first_pass_poses(dir, chunk)?;
    let targets = match &dir.manifest.second_pass_poses {
        Some(p2) => {
            let pass2: Vec<Pose<f64>> = p2.iter().map(Pose::from).collect();
            align_target_poses(&pass1, &pass2, &pass2)?.poses
        }
        None => pass1,
    };
    let scene = chunk_gaussians(dir, chunk, source, base)?;
    let t = dir.manifest.timestamps[chunk.target];
    let mut rows = Vec::with_capacity(targets.len());
    for (c, pose) in targets.iter().enumerate() {
        let cam = base.cameras[c].with_pose(*pose);
        let row = dir.image(c, chunk.target).and_then(|truth| {
            let rendered = rast.render(&scene, &cam, t).color;
            Ok(EvalRow {
                level: RowLevel::Camera,
                chunk: Some(chunk.ordinal),
                camera: Some(c),
                target_frame: Some(chunk.target),
                psnr: psnr_from_mse(crate::losses::mse(&rendered, &truth)?),
                ssim: ssim(&rendered, &truth)?,
                pose_frame: None,
                pose_rig: None,
                error: None,
            })
        });
        rows.push(row.unwrap_or_else(|e| EvalRow::failed(RowLevel::Camera, chunk.ordinal, Some(c), chunk.target, e.to_string())));
    }
    let failed: Vec<String> = rows.iter().filter_map(|r| r.error.clone()).collect();
    let summary = if failed.is_empty() {
        EvalRow {
            level: RowLevel::Chunk,
            chunk: Some(chunk.ordinal),
            camera: None,
            target_frame: Some(chunk.target),
            psnr: mean(rows.iter().map(|r| r.psnr)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
            pose_frame: pose_losses.map(|p| p.0),
            pose_rig: pose_losses.map(|p| p.1),
            error: None,
        }
    } else {
        EvalRow::failed(RowLevel::Chunk, chunk.ordinal, None, chunk.target, failed.join("; "))
    };
    rows.push(summary);
    Ok(rows)
}

/// Evaluates every chunk (at most `cap`). A chunk that cannot be evaluated
/// yields error rows instead of aborting the run; the aggregate row is the
/// mean of the successful chunk rows.
pub fn evaluate(dir: &SceneDir, source: &GaussianSource, cap: usize, rast: &Rasterizer) -> Result<EvalReport> {
    let base = match source {
        GaussianSource::Manifest => {
            if dir.manifest.gaussians.is_none() {
                return Err(Error::Validation(vec!["manifest references no gaussians".into()]));
            }
            dir.scene()?
        }
        _ => Scene4D {
            gaussians: Vec::new(),
            cameras: dir.cameras(),
            timestamps: dir.manifest.timestamps.clone(),
            sh_order: dir.manifest.sh_order,
        },
    };
    let mut report = EvalReport::default();
    let chunks = make_chunks(dir.manifest.frame_count, cap);
    for chunk in &chunks {
        match evaluate_chunk(dir, chunk, source, &base, rast) {
            Ok(rows) => report.rows.extend(rows),
            Err(e) => report
                .rows
                .push(EvalRow::failed(RowLevel::Chunk, chunk.ordinal, None, chunk.target, e.to_string())),
        }
    }
    let ok: Vec<&EvalRow> = report.rows_at(RowLevel::Chunk).filter(|r| r.error.is_none()).collect();
    if !ok.is_empty() {
        let opt_mean = |f: fn(&EvalRow) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
            v.map(|v| mean(v.into_iter()))
        };
        let agg = EvalRow {
            level: RowLevel::Aggregate,
            chunk: None,
            camera: None,
            target_frame: None,
            psnr: mean(ok.iter().map(|r| r.psnr)),
            ssim: mean(ok.iter().map(|r| r.ssim)),
            pose_frame: opt_mean(|r| r.pose_frame),
            pose_rig: opt_mean(|r| r.pose_rig),
            error: None,
        };
        report.rows.push(agg);
    }
    Ok(report)
}

/// Motion-supervision and velocity round-trip check for one camera/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCheckRow {
    pub camera: usize,
    pub frame: usize,
    /// Pixels with valid flow and depth.
    pub valid: usize,
    /// Pixels above the flow threshold that enter the motion loss.
    pub supervised: usize,
    pub motion_loss: f64,
    /// Largest |project(lift(shift)) − shift| over valid pixels, px.
    pub roundtrip_px: f64,
    /// Largest |flow − motion shift| over valid pixels, px.
    pub flow_vs_motion_px: f64,
}

pub fn flow_check_csv(rows: &[FlowCheckRow]) -> String {
    let mut out = String::from("camera,frame,valid,supervised,motion_loss,roundtrip_px,flow_vs_motion_px\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e},{:e}",
            r.camera, r.frame, r.valid, r.supervised, r.motion_loss, r.roundtrip_px, r.flow_vs_motion_px
        );
    }
    out
}

/// Runs the check on every camera/frame that has flow, motion and depth.
pub fn flow_check(dir: &SceneDir) -> Result<Vec<FlowCheckRow>> {
    let cams = dir.cameras();
    let ts = &dir.manifest.timestamps;
    let mut rows = Vec::new();
    for (c, cam) in cams.iter().enumerate() {
        for f in 0..dir.manifest.frame_count.saturating_sub(1) {
            let (Some(flow), Some(motion), Some(depth)) = (dir.flow(c, f)?, dir.motion(c, f)?, dir.depth(c, f)?) else {
                continue;
            };
            let dt = ts[f + 1] - ts[f];
            let loss = motion_loss(&motion, &flow, FLOW_THRESHOLD_PX)?;
            let (mut valid, mut roundtrip, mut mismatch) = (0usize, 0.0f64, 0.0f64);
            for i in 0..flow.flow.len() {
                if !(flow.valid[i] && depth.valid[i]) {
                    continue;
                }
                valid += 1;
                let (x, y) = ((i % cam.width) as f64, (i / cam.width) as f64);
                let shift = motion.shift(i);
                let fv = flow.flow[i];
                mismatch = mismatch.max((fv.x - shift.dx).abs().max((fv.y - shift.dy).abs()));
                let back = lift_velocity(cam, x, y, depth.values[i], shift, dt)
                    .and_then(|v| project_velocity(cam, &v, x, y, depth.values[i], dt));
                roundtrip = match back {
                    Ok(b) => roundtrip.max((b.dx - shift.dx).abs().max((b.dy - shift.dy).abs())),
                    Err(_) => f64::INFINITY,
                };
            }
            rows.push(FlowCheckRow {
                camera: c,
                frame: f,
                valid,
                supervised: loss.count,
                motion_loss: loss.value,
                roundtrip_px: roundtrip,
                flow_vs_motion_px: mismatch,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_arithmetic() {
        assert!(make_chunks(4, 100).is_empty());
        let one = make_chunks(5, 100);
        assert_eq!(one, vec![Chunk { ordinal: 0, context: [0, 1, 3, 4], target: 2 }]);
        let starts: Vec<usize> = make_chunks(23, 3).iter().map(|c| c.context[0]).collect();
        assert_eq!(starts, vec![0, 5, 10]);
        assert_eq!(make_chunks(23, 100).len(), 4);
        assert!(make_chunks(100, 0).is_empty());
    }
}
