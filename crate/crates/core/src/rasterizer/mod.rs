//! Deterministic tile-based CPU rasterizer for 4D Gaussian scenes, with an
//! analytic backward pass.
//!
//! Each Gaussian is evolved to the query time, projected with the first-order
//! (EWA) approximation, and composited front to back per 16×16 tile. Within a
//! pixel, a splat contributes wherever its Gaussian falloff is at least
//! `exp(-POWER_CUTOFF)`; the tile binning is a conservative superset of that
//! support, so tiled and untiled traversal see the same contributions.

mod backward;
mod project;

use nalgebra::Vector3;
use rayon::prelude::*;

pub use backward::{GaussianGrad, GaussianGrads};
pub(crate) use project::{project_gaussian, Projected};

use crate::geometry::CameraModel;
use crate::gaussians::Scene4D;
use crate::image::Image;
use crate::scalar::{lit, Scalar};

pub const TILE_SIZE: usize = 16;
/// Screen-space low-pass added to the diagonal of every 2D covariance, px².
pub const LOW_PASS: f64 = 0.3;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Gaussians whose temporal weight is below this are culled.
pub const MIN_TEMPORAL_WEIGHT: f64 = 1e-4;
/// Camera-frame depth below which a Gaussian counts as behind the camera.
pub const NEAR_PLANE: f64 = 1e-2;
/// A pixel is inside a splat's support when `½ dᵀ Σ⁻¹ d ≤ POWER_CUTOFF`
/// (falloff ≥ 1e-12).
pub const POWER_CUTOFF: f64 = 27.631_021_115_928_547;
/// Alpha above which `render_depth` normalizes accumulated depth.
pub const DEPTH_ALPHA_MIN: f64 = 1e-4;

/// Why Gaussians were skipped in a pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub rendered: usize,
    pub culled_temporal: usize,
    pub culled_behind: usize,
    pub degenerate: usize,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame<T: Scalar> {
    pub color: Image<T>,
    /// Accumulated `Σ wᵢ zᵢ`, i.e. expected depth times alpha.
    pub depth: Vec<T>,
    /// Accumulated opacity `1 − Π(1 − αᵢGᵢ)`.
    pub alpha: Vec<T>,
    pub stats: RenderStats,
}

impl<T: Scalar> RenderedFrame<T> {
    /// Depth normalized by alpha where alpha exceeds [`DEPTH_ALPHA_MIN`], else 0.
    pub fn expected_depth(&self) -> Vec<T> {
        self.depth
            .iter()
            .zip(&self.alpha)
            .map(|(&d, &a)| if a > lit(DEPTH_ALPHA_MIN) { d / a } else { T::zero() })
            .collect()
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone)]
pub(crate) struct Splat<T: Scalar> {
    pub id: usize,
    pub mean: [T; 2],
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub opacity: T,
    pub depth: T,
    pub color: Vector3<T>,
    /// Inclusive pixel bounds `x0, x1, y0, y1`.
    pub bbox: [usize; 4],
}

impl<T: Scalar> Splat<T> {
    /// Falloff `G` and offset `d = pixel − mean` when the pixel is inside the
    /// support.
    #[inline]
    pub fn falloff(&self, px: T, py: T) -> Option<(T, T, T)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        let power = lit::<T>(0.5) * (a * dx * dx + c * dy * dy) + b * dx * dy;
        if !(power <= lit(POWER_CUTOFF)) {
            return None;
        }
        Some(((-power).exp(), dx, dy))
    }
}

/// Largest single contributor at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dominant<T> {
    pub id: usize,
    /// Fraction of the pixel's total compositing weight.
    pub share: T,
}

/// Per-pixel contribution record used by the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution<T> {
    /// Index into the tile's splat list.
    pub slot: usize,
    pub g: T,
    pub alpha: T,
    pub transmittance: T,
    pub dx: T,
    pub dy: T,
}

pub(crate) struct PixelOut<T> {
    pub color: Vector3<T>,
    pub depth: T,
    pub transmittance: T,
}

/// Front-to-back compositing of `splats` (already depth sorted) at one pixel.
#[inline]
pub(crate) fn composite_pixel<'a, T: Scalar>(
    splats: impl Iterator<Item = &'a Splat<T>>,
    px: T,
    py: T,
    mut record: Option<&mut Vec<Contribution<T>>>,
) -> PixelOut<T> {
    let mut color = Vector3::zeros();
    let mut depth = T::zero();
    let mut trans = T::one();
    for (slot, s) in splats.enumerate() {
        let Some((g, dx, dy)) = s.falloff(px, py) else {
            continue;
        };
        let alpha = s.opacity * g;
        let w = alpha * trans;
        color += s.color * w;
        depth += s.depth * w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                slot,
                g,
                alpha,
                transmittance: trans,
                dx,
                dy,
            });
        }
        trans *= T::one() - alpha;
        if trans < lit(MIN_TRANSMITTANCE) {
            break;
        }
    }
    PixelOut {
        color,
        depth,
        transmittance: trans,
    }
}

pub(crate) struct Prepared<T: Scalar> {
    pub projected: Vec<Option<Projected<T>>>,
    pub splats: Vec<Splat<T>>,
    /// Splat indices per tile, front to back.
    pub tiles: Vec<Vec<usize>>,
    pub tiles_x: usize,
    pub stats: RenderStats,
}

pub(crate) fn prepare<T: Scalar>(scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> Prepared<T> {
    let mut stats = RenderStats::default();
    let mut projected = Vec::with_capacity(scene.gaussians.len());
    let mut splats = Vec::new();
    for (id, g) in scene.gaussians.iter().enumerate() {
        match project_gaussian(g, id, cam, t) {
            Ok(p) => {
                stats.rendered += 1;
                if let Some(s) = p.splat.clone() {
                    splats.push(s);
                }
                projected.push(Some(p));
            }
            Err(project::Culled::Temporal) => {
                stats.culled_temporal += 1;
                projected.push(None);
            }
            Err(project::Culled::Behind) => {
                stats.culled_behind += 1;
                projected.push(None);
            }
            Err(project::Culled::Degenerate) => {
                stats.degenerate += 1;
                projected.push(None);
            }
        }
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k);
            }
        }
    }
    Prepared {
        projected,
        splats,
        tiles,
        tiles_x,
        stats,
    }
}

/// Pixel ranges `(x0..x1, y0..y1)` covered by a tile, clipped to the image.
pub(crate) fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0..(x0 + TILE_SIZE).min(width), y0..(y0 + TILE_SIZE).min(height))
}

/// Renders scenes with a fixed worker count. Output is bit-identical for any
/// worker count: tiles are independent and gathered in tile order.
pub struct Rasterizer {
    pool: Option<rayon::ThreadPool>,
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self::new(1)
    }
}

impl Rasterizer {
    pub fn new(threads: usize) -> Self {
        let pool = (threads > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool")
        });
        Self { pool }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub(crate) fn map_tiles<R: Send, F>(&self, count: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
            None => (0..count).map(f).collect(),
        }
    }

    pub fn render<T: Scalar>(&self, scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> RenderedFrame<T> {
        let prep = prepare(scene, cam, t);
        let (w, h) = (cam.width, cam.height);
        let tile_count = prep.tiles.len();
        let tile_out = self.map_tiles(tile_count, |tile| {
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, w, h);
            let list = &prep.tiles[tile];
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys.clone() {
                for x in xs.clone() {
                    out.push(composite_pixel(
                        list.iter().map(|&k| &prep.splats[k]),
                        lit(x as f64),
                        lit(y as f64),
                        None,
                    ));
                }
            }
            out
        });

        let mut color = Image::zeros(w, h);
        let mut depth = vec![T::zero(); w * h];
        let mut alpha = vec![T::zero(); w * h];
        for (tile, out) in tile_out.into_iter().enumerate() {
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, w, h);
            let mut it = out.into_iter();
            for y in ys {
                for x in xs.clone() {
                    let p = it.next().expect("pixel count");
                    let i = y * w + x;
                    color.data[3 * i..3 * i + 3].copy_from_slice(p.color.as_slice());
                    depth[i] = p.depth;
                    alpha[i] = T::one() - p.transmittance;
                }
            }
        }
        RenderedFrame {
            color,
            depth,
            alpha,
            stats: prep.stats,
        }
    }

    pub fn render_depth<T: Scalar>(&self, scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> Vec<T> {
        self.render(scene, cam, t).expected_depth()
    }

    /// For each pixel, the Gaussian with the largest compositing weight and
    /// its share of the pixel's total weight. `None` where nothing is drawn.
    pub fn dominant<T: Scalar>(&self, scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> Vec<Option<Dominant<T>>> {
        let prep = prepare(scene, cam, t);
        let (w, h) = (cam.width, cam.height);
        let tile_out = self.map_tiles(prep.tiles.len(), |tile| {
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, w, h);
            let list = &prep.tiles[tile];
            let mut chain = Vec::new();
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys.clone() {
                for x in xs.clone() {
                    chain.clear();
                    composite_pixel(list.iter().map(|&k| &prep.splats[k]), lit(x as f64), lit(y as f64), Some(&mut chain));
                    let mut total = T::zero();
                    let mut best: Option<(usize, T)> = None;
                    for c in &chain {
                        let wt = c.alpha * c.transmittance;
                        total += wt;
                        if best.is_none_or(|(_, b)| wt > b) {
                            best = Some((prep.splats[list[c.slot]].id, wt));
                        }
                    }
                    out.push(best.filter(|_| total > T::zero()).map(|(id, wt)| Dominant { id, share: wt / total }));
                }
            }
            out
        });
        let mut result = vec![None; w * h];
        for (tile, out) in tile_out.into_iter().enumerate() {
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, w, h);
            let mut it = out.into_iter();
            for y in ys {
                for x in xs.clone() {
                    result[y * w + x] = it.next().expect("pixel count");
                }
            }
        }
        result
    }
}

/// Single-threaded forward pass.
pub fn rasterize<T: Scalar>(scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> RenderedFrame<T> {
    Rasterizer::new(1).render(scene, cam, t)
}

/// Alpha-normalized depth of [`rasterize`].
pub fn render_depth<T: Scalar>(scene: &Scene4D<T>, cam: &CameraModel<T>, t: T) -> Vec<T> {
    rasterize(scene, cam, t).expected_depth()
}

/// Single-threaded backward pass; see [`Rasterizer::backward`].
pub fn rasterize_backward<T: Scalar>(
    scene: &Scene4D<T>,
    cam: &CameraModel<T>,
    t: T,
    grad_color: &Image<T>,
) -> crate::Result<GaussianGrads<T>> {
    Rasterizer::new(1).backward(scene, cam, t, grad_color)
}
