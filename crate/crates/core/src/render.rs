//! Differentiable splat rasterization on the CPU.
//!
//! Gaussians are projected, globally sorted by center depth and alpha
//! composited front to back per pixel. Work is split into square tiles that
//! are processed in parallel; the backward pass reduces per-tile partial
//! gradients in tile order, so results do not depend on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::gaussian::{
    build_covariance, project_covariance, quat_to_rotation, quat_to_rotation_backward, sigmoid, GaussianCloud, SH_C0,
};
use crate::image::Image;

/// Added to the accumulated alpha when normalizing expected depth.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    /// Low-pass dilation added to the projected covariance diagonal (px²).
    pub dilation: f64,
    pub alpha_clamp: f64,
    /// Per-splat alpha below which a splat is skipped at a pixel.
    pub alpha_skip: f64,
    /// Compositing stops once transmittance would drop below this.
    pub min_transmittance: f64,
    /// Divide the composited depth by the accumulated alpha.
    pub normalize_depth: bool,
    /// Tile edge in pixels; 0 evaluates every splat at every pixel.
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            dilation: crate::gaussian::DEFAULT_DILATION,
            alpha_clamp: 0.99,
            alpha_skip: 1.0 / 255.0,
            min_transmittance: 1e-4,
            normalize_depth: true,
            tile_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub color: Image,
    pub depth: Image,
    pub alpha: Image,
    pub background: [f64; 3],
}

/// Per-Gaussian gradients with respect to the raw parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBuffer {
    pub d_positions: Vec<[f64; 3]>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_log_scales: Vec<[f64; 3]>,
    pub d_opacity_logits: Vec<f64>,
    pub d_colors: Vec<[f64; 3]>,
    /// Gradient with respect to the projected pixel-space center. Not a
    /// parameter; feeds the densification statistics.
    pub d_means2d: Vec<[f64; 2]>,
    /// Whether the Gaussian survived culling in the render.
    pub visible: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_positions: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_log_scales: vec![[0.0; 3]; n],
            d_opacity_logits: vec![0.0; n],
            d_colors: vec![[0.0; 3]; n],
            d_means2d: vec![[0.0; 2]; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_positions.is_empty()
    }

    /// Adds `other` into `self`; visibility is or-ed.
    pub fn accumulate(&mut self, other: &GradientBuffer) {
        assert_eq!(self.len(), other.len());
        fn add<const K: usize>(a: &mut [[f64; K]], b: &[[f64; K]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..K {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.d_positions, &other.d_positions);
        add(&mut self.d_rotations, &other.d_rotations);
        add(&mut self.d_log_scales, &other.d_log_scales);
        add(&mut self.d_colors, &other.d_colors);
        add(&mut self.d_means2d, &other.d_means2d);
        for (x, y) in self.d_opacity_logits.iter_mut().zip(&other.d_opacity_logits) {
            *x += y;
        }
        for (x, y) in self.visible.iter_mut().zip(&other.visible) {
            *x |= y;
        }
    }

    /// All parameter gradients flattened in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 14);
        out.extend(self.d_positions.iter().flatten());
        out.extend(self.d_rotations.iter().flatten());
        out.extend(self.d_log_scales.iter().flatten());
        out.extend(self.d_opacity_logits.iter());
        out.extend(self.d_colors.iter().flatten());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    depth: f64,
    /// Inverse projected covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    conic: [f64; 3],
    cov2d: Matrix2<f64>,
    opacity: f64,
    rgb: [f64; 3],
    /// Beyond this Mahalanobis distance the splat is certainly below `alpha_skip`.
    q_cut: f64,
    /// Inclusive pixel bounds of the footprint.
    bounds: [usize; 4],
    p_cam: Vector3<f64>,
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderState {
    pub settings: RenderSettings,
    pub camera: CameraModel,
    pub background: [f64; 3],
    n_gaussians: usize,
    splats: Vec<Splat>,
    /// Raw parameters of the rendered cloud.
    rotations: Vec<[f64; 4]>,
    log_scales: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    tiles: Vec<Tile>,
}

#[derive(Debug, Clone)]
struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into `splats`, in depth order.
    splats: Vec<u32>,
}

impl RenderState {
    pub fn n_gaussians(&self) -> usize {
        self.n_gaussians
    }

    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }
}

fn preprocess(cloud: &GaussianCloud, cam: &CameraModel, settings: &RenderSettings) -> Vec<Splat> {
    let w = cam.rotation;
    let mut splats: Vec<Splat> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let p_cam = cam.to_camera(&Vector3::from(cloud.positions[i]));
            if !(p_cam.z > cam.near) {
                return None;
            }
            let opacity = sigmoid(cloud.opacity_logits[i]);
            if opacity < settings.alpha_skip {
                return None;
            }
            let proj = cam.project_camera_point(&p_cam);
            let sigma = build_covariance(&Vector4::from(cloud.rotations[i]), &Vector3::from(cloud.log_scales[i]));
            let j = cam.projection_jacobian(&p_cam);
            let cov2d = project_covariance(&sigma, &w, &j, settings.dilation);
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(0, 1)];
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];

            // Beyond this radius alpha * G < alpha_skip, so the splat is skipped anyway.
            let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let q_max = 2.0 * (opacity / settings.alpha_skip).ln();
            let radius = (q_max.max(0.0) * lambda_max).sqrt() + 1.0;
            let mean = proj.pixel;
            let x0 = (mean.x - radius).ceil().max(0.0);
            let y0 = (mean.y - radius).ceil().max(0.0);
            let x1 = (mean.x + radius).floor().min((cam.width - 1) as f64);
            let y1 = (mean.y + radius).floor().min((cam.height - 1) as f64);
            if !(x0 <= x1 && y0 <= y1) {
                return None;
            }
            let f = cloud.colors[i];
            let rgb = [
                (SH_C0 * f[0] + 0.5).max(0.0),
                (SH_C0 * f[1] + 0.5).max(0.0),
                (SH_C0 * f[2] + 0.5).max(0.0),
            ];
            Some(Splat {
                index: i,
                mean,
                depth: p_cam.z,
                conic,
                cov2d,
                opacity,
                q_cut: q_max * (1.0 + 1e-9) + 1e-9,
                rgb,
                bounds: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
                p_cam,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

fn bin_tiles(splats: &[Splat], width: usize, height: usize, tile_size: usize) -> Vec<Tile> {
    if tile_size == 0 {
        return vec![Tile { x0: 0, y0: 0, x1: width - 1, y1: height - 1, splats: (0..splats.len() as u32).collect() }];
    }
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tiles: Vec<Tile> = (0..tiles_y)
        .flat_map(|ty| {
            (0..tiles_x).map(move |tx| Tile {
                x0: tx * tile_size,
                y0: ty * tile_size,
                x1: ((tx + 1) * tile_size).min(width) - 1,
                y1: ((ty + 1) * tile_size).min(height) - 1,
                splats: Vec::new(),
            })
        })
        .collect();
    for (k, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bounds;
        for ty in y0 / tile_size..=y1 / tile_size {
            for tx in x0 / tile_size..=x1 / tile_size {
                tiles[ty * tiles_x + tx].splats.push(k as u32);
            }
        }
    }
    tiles
}

#[derive(Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    transmittance: f64,
    gauss: f64,
    clamped: bool,
    delta: Vector2<f64>,
}

struct PixelResult {
    color: [f64; 3],
    depth_sum: f64,
    alpha: f64,
    transmittance: f64,
}

/// Front-to-back compositing of one pixel over a tile's splat list.
/// Contributions are recorded when `record` is given.
#[inline]
fn composite_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelResult {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut alpha_sum = 0.0;
    for (slot, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let delta = Vector2::new(px - s.mean.x, py - s.mean.y);
        let [a, b, c] = s.conic;
        let q = a * delta.x * delta.x + 2.0 * b * delta.x * delta.y + c * delta.y * delta.y;
        if q > s.q_cut {
            continue;
        }
        let gauss = (-0.5 * q).exp();
        let raw = s.opacity * gauss;
        let clamped = raw > settings.alpha_clamp;
        let alpha = if clamped { settings.alpha_clamp } else { raw };
        if alpha < settings.alpha_skip {
            continue;
        }
        let next_t = t * (1.0 - alpha);
        if next_t < settings.min_transmittance {
            break;
        }
        let w = alpha * t;
        for ch in 0..3 {
            color[ch] += s.rgb[ch] * w;
        }
        depth_sum += s.depth * w;
        alpha_sum += w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution { slot, alpha, transmittance: t, gauss, clamped, delta });
        }
        t = next_t;
    }
    PixelResult { color, depth_sum, alpha: alpha_sum, transmittance: t }
}

/// Renders color, expected depth and accumulated alpha.
pub fn render(
    cloud: &GaussianCloud,
    cam: &CameraModel,
    background: [f64; 3],
    settings: &RenderSettings,
) -> (Framebuffer, RenderState) {
    let (w, h) = (cam.width, cam.height);
    let splats = preprocess(cloud, cam, settings);
    let tiles = bin_tiles(&splats, w, h, settings.tile_size);

    let tile_pixels: Vec<Vec<(usize, [f64; 3], f64, f64)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut out = Vec::with_capacity((tile.x1 - tile.x0 + 1) * (tile.y1 - tile.y0 + 1));
            for y in tile.y0..=tile.y1 {
                for x in tile.x0..=tile.x1 {
                    let r = composite_pixel(&splats, &tile.splats, x as f64, y as f64, settings, None);
                    let color = [
                        r.color[0] + r.transmittance * background[0],
                        r.color[1] + r.transmittance * background[1],
                        r.color[2] + r.transmittance * background[2],
                    ];
                    let depth = if settings.normalize_depth { r.depth_sum / (r.alpha + DEPTH_EPS) } else { r.depth_sum };
                    out.push((y * w + x, color, depth, r.alpha));
                }
            }
            out
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut alpha = Image::new(w, h, 1);
    for pixels in tile_pixels {
        for (p, c, d, a) in pixels {
            color.data[3 * p..3 * p + 3].copy_from_slice(&c);
            depth.data[p] = d;
            alpha.data[p] = a;
        }
    }

    let state = RenderState {
        settings: *settings,
        camera: cam.clone(),
        background,
        n_gaussians: cloud.len(),
        splats,
        rotations: cloud.rotations.clone(),
        log_scales: cloud.log_scales.clone(),
        colors: cloud.colors.clone(),
        tiles,
    };
    (Framebuffer { color, depth, alpha, background }, state)
}

/// Screen-space gradient of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    rgb: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.rgb[k] += o.rgb[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Reverse-mode gradients of the framebuffer with respect to the raw
/// parameters of the rendered cloud.
pub fn render_backward(state: &RenderState, d_color: &Image, d_depth: &Image, d_alpha: &Image) -> Result<GradientBuffer> {
    let (w, h) = (state.camera.width, state.camera.height);
    for (img, ch, name) in [(d_color, 3, "color"), (d_depth, 1, "depth"), (d_alpha, 1, "alpha")] {
        if img.width != w || img.height != h || img.channels != ch {
            return Err(Error::Dimension(format!(
                "{name} adjoint is {}x{}x{}, framebuffer is {w}x{h}x{ch}",
                img.width, img.height, img.channels
            )));
        }
    }
    let settings = &state.settings;
    let bg = state.background;
    let splats = &state.splats;

    let partials: Vec<Vec<SplatGrad>> = state
        .tiles
        .par_iter()
        .map(|tile| {
            let mut acc = vec![SplatGrad::default(); tile.splats.len()];
            let mut contribs = Vec::new();
            for y in tile.y0..=tile.y1 {
                for x in tile.x0..=tile.x1 {
                    let p = y * w + x;
                    let g_color = [d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]];
                    let g_depth = d_depth.data[p];
                    let g_alpha = d_alpha.data[p];
                    if g_color == [0.0; 3] && g_depth == 0.0 && g_alpha == 0.0 {
                        continue;
                    }
                    contribs.clear();
                    let r = composite_pixel(splats, &tile.splats, x as f64, y as f64, settings, Some(&mut contribs));

                    // Output = Σ v_i w_i + T_final b with v_i = (rgb, z, 1), b = (bg, 0, 0).
                    let (g_dsum, g_asum) = if settings.normalize_depth {
                        let denom = r.alpha + DEPTH_EPS;
                        (g_depth / denom, g_alpha - g_depth * r.depth_sum / (denom * denom))
                    } else {
                        (g_depth, g_alpha)
                    };
                    let mut later = r.transmittance * (g_color[0] * bg[0] + g_color[1] * bg[1] + g_color[2] * bg[2]);
                    for c in contribs.iter().rev() {
                        let s = &splats[tile.splats[c.slot] as usize];
                        let gv = g_color[0] * s.rgb[0] + g_color[1] * s.rgb[1] + g_color[2] * s.rgb[2]
                            + g_dsum * s.depth
                            + g_asum;
                        let weight = c.alpha * c.transmittance;
                        let d_alpha_px = c.transmittance * gv - later / (1.0 - c.alpha);
                        later += gv * weight;

                        let g = &mut acc[c.slot];
                        for ch in 0..3 {
                            g.rgb[ch] += g_color[ch] * weight;
                        }
                        g.depth += g_dsum * weight;
                        if c.clamped {
                            continue;
                        }
                        g.opacity += d_alpha_px * c.gauss;
                        let dq = -0.5 * c.gauss * s.opacity * d_alpha_px;
                        let (dx, dy) = (c.delta.x, c.delta.y);
                        g.conic[0] += dq * dx * dx;
                        g.conic[1] += dq * 2.0 * dx * dy;
                        g.conic[2] += dq * dy * dy;
                        let [a, b, cc] = s.conic;
                        g.mean[0] -= dq * 2.0 * (a * dx + b * dy);
                        g.mean[1] -= dq * 2.0 * (b * dx + cc * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); splats.len()];
    for (tile, acc) in state.tiles.iter().zip(&partials) {
        for (slot, g) in acc.iter().enumerate() {
            screen[tile.splats[slot] as usize].add(g);
        }
    }

    let per_splat: Vec<(usize, SplatParamGrad)> =
        splats.par_iter().zip(screen.par_iter()).map(|(s, g)| (s.index, splat_param_grad(state, s, g))).collect();

    let mut out = GradientBuffer::zeros(state.n_gaussians);
    for (i, g) in per_splat {
        out.d_positions[i] = g.position;
        out.d_rotations[i] = g.rotation;
        out.d_log_scales[i] = g.log_scale;
        out.d_opacity_logits[i] = g.opacity_logit;
        out.d_colors[i] = g.color;
        out.d_means2d[i] = g.mean2d;
        out.visible[i] = true;
    }
    Ok(out)
}

struct SplatParamGrad {
    position: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    color: [f64; 3],
    mean2d: [f64; 2],
}

fn splat_param_grad(state: &RenderState, s: &Splat, g: &SplatGrad) -> SplatParamGrad {
    let cam = &state.camera;
    let i = s.index;

    let f = state.colors[i];
    let mut color = [0.0; 3];
    for k in 0..3 {
        if SH_C0 * f[k] + 0.5 > 0.0 {
            color[k] = g.rgb[k] * SH_C0;
        }
    }
    let opacity_logit = g.opacity * s.opacity * (1.0 - s.opacity);

    // conic = inverse(cov2d)
    let (ca, cb, cc) = (s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 1)]);
    let det = ca * cc - cb * cb;
    let inv_det2 = 1.0 / (det * det);
    let [ga, gb, gc] = g.conic;
    let d_ca = (-ga * cc * cc + gb * cb * cc - gc * cb * cb) * inv_det2;
    let d_cb = (2.0 * ga * cb * cc - gb * (ca * cc + cb * cb) + 2.0 * gc * ca * cb) * inv_det2;
    let d_cc = (-ga * cb * cb + gb * ca * cb - gc * ca * ca) * inv_det2;
    let d_cov2d = Matrix2::new(d_ca, 0.5 * d_cb, 0.5 * d_cb, d_cc);

    // cov2d = T Σ Tᵀ with T = J W
    let p = s.p_cam;
    let j = cam.projection_jacobian(&p);
    let wrot = cam.rotation;
    let t = j * wrot;
    let quat = Vector4::from(state.rotations[i]);
    let log_scale = Vector3::from(state.log_scales[i]);
    let sigma = build_covariance(&quat, &log_scale);
    let d_sigma: Matrix3<f64> = t.transpose() * d_cov2d * t;
    let d_t: Matrix2x3<f64> = 2.0 * d_cov2d * t * sigma;
    let d_j = d_t * wrot.transpose();

    // Σ = M Mᵀ with M = R S
    let rot = quat_to_rotation(&quat);
    let scale = log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let d_m = 2.0 * d_sigma * m;
    let mut d_rot = Matrix3::zeros();
    let mut log_scale_grad = [0.0; 3];
    for c in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            d_rot[(r, c)] = d_m[(r, c)] * scale[c];
            ds += d_m[(r, c)] * rot[(r, c)];
        }
        log_scale_grad[c] = ds * scale[c];
    }
    let d_quat = quat_to_rotation_backward(&quat, &d_rot);

    // center: pixel mean, depth feature and the Jacobian all depend on p_cam
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_p = j.transpose() * Vector2::new(g.mean[0], g.mean[1]);
    d_p.z += g.depth;
    d_p.x += d_j[(0, 2)] * (-fx * iz2);
    d_p.y += d_j[(1, 2)] * (-fy * iz2);
    d_p.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * p.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * p.y * iz3);
    let d_pos = wrot.transpose() * d_p;

    SplatParamGrad {
        position: [d_pos.x, d_pos.y, d_pos.z],
        rotation: [d_quat[0], d_quat[1], d_quat[2], d_quat[3]],
        log_scale: log_scale_grad,
        opacity_logit,
        color,
        mean2d: g.mean,
    }
}
