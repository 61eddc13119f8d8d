//! Post-optimization: prune, then photometric refinement of the surviving
//! Gaussians against the input views with per-group Adam updates.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussians::{prune, Gaussian4D, Scene4D};
use crate::image::Image;
use crate::losses::{mse, ssim, ssim_with_grad, LossWeights};
use crate::rasterizer::{GaussianGrad, Rasterizer};
use crate::scalar::{lit, Scalar};

const MIN_SCALE: f64 = 1e-6;
const MIN_GATE: f64 = 1e-6;
const MIN_SIGMA_T: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    pub prune_threshold: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    /// Multiplied by the scene extent (see [`scene_extent`]).
    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    /// Rate for velocities, `tau`, `sigma_t` and `gate`; only used when
    /// `optimize_dynamics` is set.
    pub lr_dynamics: f64,
    pub optimize_dynamics: bool,
    pub use_ssim: bool,
    /// Reject an update that raises the loss, restore the previous state and
    /// halve the step size for the remaining steps.
    pub backtrack: bool,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            prune_threshold: 0.01,
            lr_color: 5e-3,
            lr_opacity: 5e-3,
            lr_position: 1.6e-5,
            lr_scale: 1e-3,
            lr_rotation: 1e-4,
            lr_dynamics: 1e-4,
            optimize_dynamics: false,
            use_ssim: true,
            backtrack: true,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RefineConfig {
    /// Learning rates may be zero (that group is frozen) but not negative.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, lr) in [
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_position", self.lr_position),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_dynamics", self.lr_dynamics),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                bad.push(format!("{name} = {lr} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            bad.push(format!("prune_threshold = {} must lie in [0, 1]", self.prune_threshold));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            bad.push(format!("eps = {} must be positive", self.eps));
        }
        if let Err(Error::Validation(mut w)) = self.weights.validate() {
            bad.append(&mut w);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// A reference image seen by scene camera `camera` at time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct View<T: Scalar> {
    pub image: Image<T>,
    pub camera: usize,
    pub time: T,
}

/// Loss of the scene after `step` updates, averaged over views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome<T: Scalar> {
    pub scene: Scene4D<T>,
    /// `steps + 1` rows: before the first update, then after each update.
    pub trace: Vec<TraceRow>,
    pub before_prune: usize,
}

/// `step,total,mse,ssim` rows with a header line.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,total,mse,ssim\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e}", r.step, r.total, r.mse, r.ssim);
    }
    out
}

/// 1.1 × the largest distance from a camera center to the rig centroid, or 1
/// for a single camera.
pub fn scene_extent<T: Scalar>(scene: &Scene4D<T>) -> T {
    if scene.cameras.len() < 2 {
        return T::one();
    }
    let centers: Vec<Vector3<T>> = scene.cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().fold(Vector3::zeros(), |a, c| a + c) / lit::<T>(centers.len() as f64);
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(T::zero(), T::max);
    if radius > T::zero() {
        radius * lit(1.1)
    } else {
        T::one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Position,
    Rotation,
    Scale,
    Color,
    Opacity,
    Dynamics,
}

const GROUPS: [Group; 6] = [
    Group::Position,
    Group::Rotation,
    Group::Scale,
    Group::Color,
    Group::Opacity,
    Group::Dynamics,
];

fn push3<T: Scalar>(out: &mut Vec<T>, v: &Vector3<T>) {
    out.extend_from_slice(v.as_slice());
}

fn pack_params<T: Scalar>(g: &Gaussian4D<T>, group: Group, out: &mut Vec<T>) {
    match group {
        Group::Position => push3(out, &g.mu),
        Group::Rotation => out.extend_from_slice(&[g.q.w, g.q.i, g.q.j, g.q.k]),
        Group::Scale => push3(out, &g.s),
        Group::Color => push3(out, &g.color),
        Group::Opacity => out.extend_from_slice(&g.opacity_sh),
        Group::Dynamics => {
            out.extend_from_slice(&[g.tau, g.sigma_t, g.gate]);
            for v in [&g.v_fwd, &g.v_bwd, &g.w_fwd, &g.w_bwd] {
                push3(out, v);
            }
        }
    }
}

fn pack_grad<T: Scalar>(g: &GaussianGrad<T>, group: Group, out: &mut Vec<T>) {
    match group {
        Group::Position => push3(out, &g.mu),
        Group::Rotation => out.extend_from_slice(g.q.as_slice()),
        Group::Scale => push3(out, &g.s),
        Group::Color => push3(out, &g.color),
        Group::Opacity => out.extend_from_slice(&g.opacity_sh),
        Group::Dynamics => {
            out.extend_from_slice(&[g.tau, g.sigma_t, g.gate]);
            for v in [&g.v_fwd, &g.v_bwd, &g.w_fwd, &g.w_bwd] {
                push3(out, v);
            }
        }
    }
}

/// Writes `p` back and projects onto the feasible set. Returns the number of
/// values consumed.
fn unpack<T: Scalar>(g: &mut Gaussian4D<T>, group: Group, p: &[T]) -> usize {
    let v3 = |k: usize| Vector3::new(p[k], p[k + 1], p[k + 2]);
    match group {
        Group::Position => {
            g.mu = v3(0);
            3
        }
        Group::Rotation => {
            let q = nalgebra::Quaternion::new(p[0], p[1], p[2], p[3]);
            let n = q.norm();
            g.q = if n > T::zero() && n.is_finite_value() {
                q / n
            } else {
                nalgebra::Quaternion::identity()
            };
            4
        }
        Group::Scale => {
            g.s = v3(0).map(|s| s.max(lit(MIN_SCALE)));
            3
        }
        Group::Color => {
            g.color = v3(0).map(|c| c.clamp(T::zero(), T::one()));
            3
        }
        Group::Opacity => {
            let n = g.opacity_sh.len();
            g.opacity_sh.copy_from_slice(&p[..n]);
            n
        }
        Group::Dynamics => {
            g.tau = p[0];
            g.sigma_t = p[1].max(lit(MIN_SIGMA_T));
            g.gate = p[2].clamp(lit(MIN_GATE), T::one());
            g.v_fwd = v3(3);
            g.v_bwd = v3(6);
            g.w_fwd = v3(9);
            g.w_bwd = v3(12);
            15
        }
    }
}

#[derive(Clone)]
struct Adam<T> {
    lr: T,
    t: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    fn new(lr: T, len: usize) -> Self {
        Self {
            lr,
            t: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// One update with the rate multiplied by `shrink`.
    fn step(&mut self, params: &mut [T], grads: &[T], cfg: &RefineConfig, shrink: T) {
        let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
        let eps = lit::<T>(cfg.eps);
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = self.lr * shrink;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

struct ViewEval<T: Scalar> {
    total: T,
    mse: T,
    ssim: T,
    grads: Option<Vec<GaussianGrad<T>>>,
}

fn eval_view<T: Scalar>(
    rast: &Rasterizer,
    scene: &Scene4D<T>,
    view: &View<T>,
    cfg: &RefineConfig,
    scale: T,
    want_grad: bool,
) -> Result<ViewEval<T>> {
    let cam = &scene.cameras[view.camera];
    let frame = rast.render(scene, cam, view.time);
    let rendered = &frame.color;
    let err = mse(rendered, &view.image)?;
    let (w_mse, w_ssim) = (lit::<T>(cfg.weights.mse), lit::<T>(cfg.weights.ssim));
    let (s, s_grad) = if cfg.use_ssim && want_grad {
        let (s, g) = ssim_with_grad(rendered, &view.image)?;
        (s, Some(g))
    } else {
        (ssim(rendered, &view.image)?, None)
    };
    let mut total = w_mse * err;
    if cfg.use_ssim {
        total += w_ssim * (T::one() - s);
    }
    let grads = if want_grad {
        let n = lit::<T>(rendered.data.len() as f64);
        let mut adj = Image::zeros(rendered.width, rendered.height);
        for (i, a) in adj.data.iter_mut().enumerate() {
            *a = w_mse * lit::<T>(2.0) * (rendered.data[i] - view.image.data[i]) / n;
            if let Some(g) = &s_grad {
                *a -= w_ssim * g.data[i];
            }
            *a *= scale;
        }
        Some(rast.backward(scene, cam, view.time, &adj)?.grads)
    } else {
        None
    };
    Ok(ViewEval {
        total,
        mse: err,
        ssim: s,
        grads,
    })
}

fn validate_views<T: Scalar>(scene: &Scene4D<T>, views: &[View<T>]) -> Result<()> {
    let mut bad = Vec::new();
    for (i, v) in views.iter().enumerate() {
        match scene.cameras.get(v.camera) {
            None => bad.push(format!(
                "view #{i}: camera index {} out of range ({} cameras)",
                v.camera,
                scene.cameras.len()
            )),
            Some(c) if c.width != v.image.width || c.height != v.image.height => bad.push(format!(
                "view #{i}: image {}x{} does not match camera {}x{}",
                v.image.width, v.image.height, c.width, c.height
            )),
            Some(_) => {}
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(bad))
    }
}

/// Prunes once, then runs `cfg.steps` Adam updates on the averaged
/// per-view loss `λ_mse·MSE + λ_ssim·(1 − SSIM)`. The Gaussian count never
/// changes after the prune. With `cfg.backtrack` an update that raises the
/// loss is undone (parameters and moments) and the step size halved, so the
/// trace never increases.
pub fn refine<T: Scalar>(
    rast: &Rasterizer,
    scene: &Scene4D<T>,
    views: &[View<T>],
    cfg: &RefineConfig,
) -> Result<RefineOutcome<T>> {
    cfg.validate()?;
    validate_views(scene, views)?;
    if views.is_empty() {
        return Err(Error::Validation(vec!["at least one view is required".into()]));
    }
    let before_prune = scene.len();
    let mut scene = prune(scene, lit(cfg.prune_threshold));
    if scene.is_empty() {
        return Err(Error::EmptyAfterPrune {
            before: before_prune,
            after: 0,
        });
    }

    let extent = scene_extent(&scene);
    let rate = |group: Group| -> T {
        match group {
            Group::Position => lit::<T>(cfg.lr_position) * extent,
            Group::Rotation => lit(cfg.lr_rotation),
            Group::Scale => lit(cfg.lr_scale),
            Group::Color => lit(cfg.lr_color),
            Group::Opacity => lit(cfg.lr_opacity),
            Group::Dynamics if cfg.optimize_dynamics => lit(cfg.lr_dynamics),
            Group::Dynamics => T::zero(),
        }
    };
    let active: Vec<Group> = GROUPS.into_iter().filter(|&g| rate(g) > T::zero()).collect();
    let mut optim: Vec<Adam<T>> = active
        .iter()
        .map(|&g| {
            let mut p = Vec::new();
            for gs in &scene.gaussians {
                pack_params(gs, g, &mut p);
            }
            Adam::new(rate(g), p.len())
        })
        .collect();

    let inv_views = T::one() / lit::<T>(views.len() as f64);
    let eval_all = |scene: &Scene4D<T>, want_grad: bool| -> Result<(TraceRow, Vec<ViewEval<T>>)> {
        let evals = views
            .iter()
            .map(|v| eval_view(rast, scene, v, cfg, inv_views, want_grad))
            .collect::<Result<Vec<_>>>()?;
        let mean = |f: fn(&ViewEval<T>) -> T| (evals.iter().fold(T::zero(), |a, e| a + f(e)) * inv_views).to_f64_lossy();
        let row = TraceRow {
            step: 0,
            total: mean(|e| e.total),
            mse: mean(|e| e.mse),
            ssim: mean(|e| e.ssim),
        };
        Ok((row, evals))
    };

    let (mut current, mut evals) = eval_all(&scene, cfg.steps > 0 && !active.is_empty())?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(current);
    let mut shrink = T::one();
    for step in 1..=cfg.steps {
        if active.is_empty() {
            trace.push(TraceRow { step, ..current });
            continue;
        }
        let sh_len = scene.gaussians[0].opacity_sh.len();
        let mut grads = vec![GaussianGrad::zeros(sh_len); scene.len()];
        for e in &evals {
            for (acc, g) in grads.iter_mut().zip(e.grads.as_ref().expect("gradients requested")) {
                acc.add_scaled(g, T::one());
            }
        }
        let saved = cfg.backtrack.then(|| (scene.clone(), optim.clone()));
        for (group, adam) in active.iter().zip(optim.iter_mut()) {
            let mut p = Vec::with_capacity(adam.m.len());
            let mut g = Vec::with_capacity(adam.m.len());
            for (gs, gr) in scene.gaussians.iter().zip(&grads) {
                pack_params(gs, *group, &mut p);
                pack_grad(gr, *group, &mut g);
            }
            adam.step(&mut p, &g, cfg, shrink);
            let mut k = 0;
            for gs in scene.gaussians.iter_mut() {
                k += unpack(gs, *group, &p[k..]);
            }
        }
        let (row, next) = eval_all(&scene, step < cfg.steps)?;
        match saved {
            Some((prev_scene, prev_optim)) if !(row.total <= current.total) => {
                scene = prev_scene;
                optim = prev_optim;
                shrink *= lit(0.5);
                log::debug!("step {step}: loss rose to {:e}, step size now x{:e}", row.total, shrink.to_f64_lossy());
                trace.push(TraceRow { step, ..current });
            }
            _ => {
                current = TraceRow { step, ..row };
                evals = next;
                trace.push(current);
            }
        }
    }
    Ok(RefineOutcome {
        scene,
        trace,
        before_prune,
    })
}
