//! Synthetic scenes and numerical oracles.
//!
//! Scenes are built from known Gaussian clouds and rendered with the same
//! renderer the trainer uses, so ground-truth images and depths are exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CorrespondenceSet, Match};
use crate::error::{Error, Result};
use crate::gaussian::{logit, rgb_to_feature, GaussianCloud};
use crate::image::Image;
use crate::render::{render, GradientBuffer, RenderSettings};
use crate::scene::{write_scene, SceneBundle, SceneContents};
use crate::train::View;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// One textured sheet facing the cameras.
    TexturedPlane,
    /// A textured backdrop with a smaller textured patch in front of it.
    TwoLayer,
    /// Randomly placed, oriented and colored Gaussians.
    RandomBlobCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub kind: SceneKind,
    /// Number of Gaussians; for sheet scenes, the approximate total over all sheets.
    pub n_gaussians: usize,
    pub n_cameras: usize,
    /// Radius of the camera ring in the z = 0 plane.
    pub ring_radius: f64,
    pub look_at: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Texture cycles per scene unit along x.
    pub texture_frequency: f64,
    /// Depth of the plane, or of the backdrop for two-layer scenes.
    pub plane_depth: f64,
    pub foreground_depth: f64,
    pub foreground_half_size: f64,
    /// Views held out for testing, interleaved with the training views.
    pub n_test: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self::two_layer()
    }
}

impl SyntheticSceneSpec {
    pub fn textured_plane() -> Self {
        Self {
            kind: SceneKind::TexturedPlane,
            n_gaussians: 6000,
            n_cameras: 5,
            ring_radius: 0.3,
            look_at: [0.0, 0.0, 2.0],
            width: 64,
            height: 48,
            focal: 64.0,
            texture_frequency: 0.5,
            plane_depth: 2.0,
            foreground_depth: 1.0,
            foreground_half_size: 0.3,
            n_test: 2,
            background: [0.0; 3],
            seed: 0,
        }
    }

    pub fn two_layer() -> Self {
        Self {
            kind: SceneKind::TwoLayer,
            n_gaussians: 3000,
            n_cameras: 5,
            ring_radius: 0.5,
            look_at: [0.0, 0.0, 4.0],
            width: 64,
            height: 48,
            focal: 64.0,
            texture_frequency: 0.5,
            plane_depth: 6.0,
            foreground_depth: 3.0,
            foreground_half_size: 0.6,
            n_test: 2,
            background: [0.0; 3],
            seed: 0,
        }
    }

    pub fn random_blob_cloud() -> Self {
        Self {
            kind: SceneKind::RandomBlobCloud,
            n_gaussians: 20,
            n_cameras: 3,
            ring_radius: 0.3,
            look_at: [0.0, 0.0, 3.0],
            width: 16,
            height: 16,
            focal: 16.0,
            texture_frequency: 1.0,
            plane_depth: 3.0,
            foreground_depth: 2.0,
            foreground_half_size: 0.5,
            n_test: 1,
            background: [0.0; 3],
            seed: 0,
        }
    }

    pub fn preset(kind: SceneKind) -> Self {
        match kind {
            SceneKind::TexturedPlane => Self::textured_plane(),
            SceneKind::TwoLayer => Self::two_layer(),
            SceneKind::RandomBlobCloud => Self::random_blob_cloud(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.n_gaussians == 0 {
            return bad("n_gaussians must be at least 1");
        }
        if self.n_cameras < 2 {
            return bad("at least two cameras are needed");
        }
        if self.n_test >= self.n_cameras {
            return bad("at least one camera must remain for training");
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if !(self.ring_radius >= 0.0) || !(self.texture_frequency > 0.0) {
            return bad("ring radius must be non-negative and texture frequency positive");
        }
        if self.look_at[2] <= 0.0 || self.plane_depth <= 0.0 {
            return bad("the scene must lie in front of the camera ring (z > 0)");
        }
        if self.kind == SceneKind::TwoLayer && !(self.foreground_depth > 0.0 && self.foreground_depth < self.plane_depth) {
            return bad("the foreground must lie between the cameras and the backdrop");
        }
        Ok(())
    }

    /// Cameras evenly spaced on the ring, all looking at `look_at`.
    pub fn cameras(&self) -> Vec<(String, CameraModel)> {
        let target = Vector3::from(self.look_at);
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        (0..self.n_cameras)
            .map(|i| {
                let theta = 2.0 * PI * i as f64 / self.n_cameras as f64;
                let eye = Vector3::new(self.ring_radius * theta.cos(), self.ring_radius * theta.sin(), 0.0);
                let cam = CameraModel::look_at(eye, target, self.focal, self.focal, cx, cy, self.width, self.height);
                (format!("cam{i:02}"), cam)
            })
            .collect()
    }

    /// Test views are every other camera starting at index 1.
    pub fn split(&self) -> (Vec<String>, Vec<String>) {
        let ids: Vec<String> = (0..self.n_cameras).map(|i| format!("cam{i:02}")).collect();
        let test: Vec<usize> = (0..self.n_test).map(|k| (2 * k + 1) % self.n_cameras).collect();
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, id) in ids.into_iter().enumerate() {
            if test.contains(&i) {
                held.push(id);
            } else {
                train.push(id);
            }
        }
        (train, held)
    }

    /// Half extents of a sheet at depth `z` that covers every camera's view,
    /// including sideways shifts of up to `margin`.
    fn sheet_half_extent(&self, z: f64, margin: f64) -> (f64, f64) {
        let hx = z * self.width as f64 / (2.0 * self.focal) + self.ring_radius + margin;
        let hy = z * self.height as f64 / (2.0 * self.focal) + self.ring_radius + margin;
        (hx, hy)
    }
}

/// Backdrop texture: a dominant x sinusoid with phase-shifted channels.
pub fn plane_texture(x: f64, y: f64, frequency: f64) -> [f64; 3] {
    let w = 2.0 * PI * frequency;
    [0, 1, 2].map(|c| {
        let phase = 2.0 * PI * c as f64 / 3.0;
        0.5 + 0.3 * (w * x + phase).sin() + 0.12 * (0.61 * w * y + c as f64).sin()
    })
}

/// Foreground texture: diagonal stripes in warm colors.
pub fn patch_texture(x: f64, y: f64, frequency: f64) -> [f64; 3] {
    let w = 2.0 * PI * frequency;
    let s = (w * (x + 0.5 * y)).sin();
    [0.75 + 0.2 * s, 0.45 - 0.25 * s, 0.2 + 0.1 * (w * y).cos()]
}

/// Appends a grid of flat Gaussians on the plane `z` over `[-hx, hx] × [-hy, hy]`.
pub fn add_sheet(
    cloud: &mut GaussianCloud,
    center: [f64; 2],
    z: f64,
    half: (f64, f64),
    count: usize,
    opacity: f64,
    texture: impl Fn(f64, f64) -> [f64; 3],
) {
    let spacing = (4.0 * half.0 * half.1 / count.max(1) as f64).sqrt();
    let nx = ((2.0 * half.0 / spacing).round() as usize).max(1);
    let ny = ((2.0 * half.1 / spacing).round() as usize).max(1);
    let (sx, sy) = (2.0 * half.0 / nx as f64, 2.0 * half.1 / ny as f64);
    let log_scale = [(0.7 * sx).ln(), (0.7 * sy).ln(), (0.01 * sx.min(sy)).ln()];
    for j in 0..ny {
        for i in 0..nx {
            let x = center[0] - half.0 + (i as f64 + 0.5) * sx;
            let y = center[1] - half.1 + (j as f64 + 0.5) * sy;
            let rgb = texture(x, y);
            cloud.push([x, y, z], [1.0, 0.0, 0.0, 0.0], log_scale, logit(opacity), rgb.map(rgb_to_feature));
        }
    }
}

/// Ground-truth cloud for a spec.
pub fn build_gt_cloud(spec: &SyntheticSceneSpec) -> GaussianCloud {
    let mut cloud = GaussianCloud::new();
    let f = spec.texture_frequency;
    match spec.kind {
        SceneKind::TexturedPlane => {
            let half = spec.sheet_half_extent(spec.plane_depth, 0.5);
            add_sheet(&mut cloud, [0.0, 0.0], spec.plane_depth, half, spec.n_gaussians, 0.95, |x, y| plane_texture(x, y, f));
        }
        SceneKind::TwoLayer => {
            let back = spec.sheet_half_extent(spec.plane_depth, 0.5);
            let fh = spec.foreground_half_size;
            // split the budget so both sheets have a similar on-screen density
            let back_px = back.0 * back.1 / (spec.plane_depth * spec.plane_depth);
            let front_px = fh * fh / (spec.foreground_depth * spec.foreground_depth);
            let n_front = ((spec.n_gaussians as f64 * front_px / (front_px + back_px)).round() as usize).max(1);
            let n_back = spec.n_gaussians.saturating_sub(n_front).max(1);
            add_sheet(&mut cloud, [0.0, 0.0], spec.plane_depth, back, n_back, 0.95, |x, y| plane_texture(x, y, f));
            let c = [spec.look_at[0], spec.look_at[1]];
            add_sheet(&mut cloud, c, spec.foreground_depth, (fh, fh), n_front, 0.95, |x, y| patch_texture(x, y, 2.0 * f));
        }
        SceneKind::RandomBlobCloud => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let t = Vector3::from(spec.look_at);
            let spread = 0.25 * t.z;
            for _ in 0..spec.n_gaussians {
                let p = t + Vector3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread));
                let q = random_unit_quaternion(&mut rng);
                let s = [0, 1, 2].map(|_| rng.random_range(0.05f64..0.25).ln());
                let rgb = [0, 1, 2].map(|_| rng.random_range(0.1..0.9));
                cloud.push(p.into(), q, s, logit(rng.random_range(0.3..0.9)), rgb.map(rgb_to_feature));
            }
        }
    }
    cloud
}

pub fn random_unit_quaternion<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let q = UnitQuaternion::from_euler_angles(rng.random_range(-PI..PI), rng.random_range(-PI..PI), rng.random_range(-PI..PI));
    [q.w, q.i, q.j, q.k]
}

/// A generated scene held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub gt: GaussianCloud,
    pub cameras: Vec<(String, CameraModel)>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Ground-truth colors, quantized to 8 bits as they are stored on disk.
    pub images: BTreeMap<String, Image>,
    /// Ground-truth expected depth, exactly as rendered.
    pub depths: BTreeMap<String, Image>,
    pub alphas: BTreeMap<String, Image>,
}

/// Renders ground truth for every camera of the spec.
pub fn make_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let gt = build_gt_cloud(spec);
    let cameras = spec.cameras();
    let (train, test) = spec.split();
    let settings = RenderSettings::default();
    let mut images = BTreeMap::new();
    let mut depths = BTreeMap::new();
    let mut alphas = BTreeMap::new();
    for (id, cam) in &cameras {
        let (fb, _) = render(&gt, cam, spec.background, &settings);
        images.insert(id.clone(), fb.color.quantized_u8());
        depths.insert(id.clone(), fb.depth);
        alphas.insert(id.clone(), fb.alpha);
    }
    Ok(SyntheticScene { spec: spec.clone(), gt, cameras, train, test, images, depths, alphas })
}

impl SyntheticScene {
    pub fn camera(&self, id: &str) -> &CameraModel {
        &self.cameras.iter().find(|(c, _)| c == id).expect("known camera id").1
    }

    pub fn camera_map(&self) -> BTreeMap<String, CameraModel> {
        self.cameras.iter().cloned().collect()
    }

    pub fn view(&self, id: &str) -> View {
        View {
            id: id.to_string(),
            camera: self.camera(id).clone(),
            image: self.images[id].clone(),
            depth: Some(self.depths[id].clone()),
        }
    }

    pub fn train_views(&self) -> Vec<View> {
        self.train.iter().map(|id| self.view(id)).collect()
    }

    pub fn test_views(&self) -> Vec<View> {
        self.test.iter().map(|id| self.view(id)).collect()
    }

    /// Axis-aligned bounds of the ground-truth centers.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (lo, hi) = self.gt.bounds().expect("scenes are never empty");
        (lo.into(), hi.into())
    }

    /// Exact correspondences between every pair of training views, plus noise
    /// and outliers as requested.
    pub fn fabricate_train_correspondences<R: Rng + ?Sized>(
        &self,
        per_pair: usize,
        noise_px: f64,
        outlier_rate: f64,
        rng: &mut R,
    ) -> Vec<CorrespondenceSet> {
        let mut sets = Vec::new();
        for (i, a) in self.train.iter().enumerate() {
            for b in &self.train[i + 1..] {
                let points = self.surface_samples(a, b, per_pair, rng);
                sets.push(fabricate_correspondences(&points, (a, self.camera(a)), (b, self.camera(b)), noise_px, outlier_rate, rng));
            }
        }
        sets
    }

    /// Points on the rendered surface of view `a` that are also visible,
    /// unoccluded and away from depth edges in view `b`.
    pub fn surface_samples<R: Rng + ?Sized>(&self, a: &str, b: &str, count: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        let (cam_a, cam_b) = (self.camera(a), self.camera(b));
        let (da, aa) = (&self.depths[a], &self.alphas[a]);
        let (db, ab) = (&self.depths[b], &self.alphas[b]);
        let mut out = Vec::with_capacity(count);
        let max_tries = count * 200;
        let mut tries = 0;
        while out.len() < count && tries < max_tries {
            tries += 1;
            let r = rng.random_range(1..cam_a.height - 1);
            let c = rng.random_range(1..cam_a.width - 1);
            if aa.get(r, c, 0) < 0.99 || is_depth_edge(da, r, c) {
                continue;
            }
            let z = da.get(r, c, 0);
            let p_cam = Vector3::new((c as f64 - cam_a.cx) / cam_a.fx * z, (r as f64 - cam_a.cy) / cam_a.fy * z, z);
            let p = cam_a.rotation.transpose() * (p_cam - cam_a.translation);
            let proj = cam_b.project_point(&p);
            let (x, y) = (proj.pixel.x, proj.pixel.y);
            if !proj.valid || x < 1.0 || y < 1.0 || x > (cam_b.width - 2) as f64 || y > (cam_b.height - 2) as f64 {
                continue;
            }
            let (rb, cb) = (y.round() as usize, x.round() as usize);
            if ab.get(rb, cb, 0) < 0.99 || is_depth_edge(db, rb, cb) {
                continue;
            }
            if (db.sample_bilinear(x, y, 0) - proj.depth).abs() > 0.01 * proj.depth {
                continue;
            }
            out.push(p);
        }
        out
    }

    pub fn contents(&self, correspondences: Option<Vec<CorrespondenceSet>>) -> SceneContents {
        SceneContents {
            cameras: self.cameras.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            images: self.images.clone(),
            depths: self.depths.clone(),
            correspondences,
            init_ply: None,
        }
    }

    pub fn write(&self, dir: &Path, correspondences: Option<Vec<CorrespondenceSet>>) -> Result<SceneBundle> {
        write_scene(dir, &self.contents(correspondences))
    }
}

fn is_depth_edge(depth: &Image, r: usize, c: usize) -> bool {
    let d = depth.get(r, c, 0);
    let r0 = r.saturating_sub(1);
    let c0 = c.saturating_sub(1);
    for rr in r0..=(r + 1).min(depth.height - 1) {
        for cc in c0..=(c + 1).min(depth.width - 1) {
            if (depth.get(rr, cc, 0) - d).abs() > 0.02 * d {
                return true;
            }
        }
    }
    false
}

/// Projects `points` into both views and perturbs the pixels.
///
/// Inliers get Gaussian pixel noise and confidence 0.9; a fraction
/// `outlier_rate` instead gets a uniformly random pixel in view b and
/// confidence 0.1.
pub fn fabricate_correspondences<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    view_a: (&str, &CameraModel),
    view_b: (&str, &CameraModel),
    noise_px: f64,
    outlier_rate: f64,
    rng: &mut R,
) -> CorrespondenceSet {
    let (cam_a, cam_b) = (view_a.1, view_b.1);
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("finite noise");
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let mut matches = Vec::with_capacity(points.len());
    for p in points {
        let pa = cam_a.project_point(p).pixel;
        let pb = cam_b.project_point(p).pixel;
        let outlier = outlier_rate > 0.0 && rng.random_bool(outlier_rate.min(1.0));
        let mut jitter = || if noise_px > 0.0 { noise.sample(rng) } else { 0.0 };
        let (xa, ya) = (clamp(pa.x + jitter(), cam_a.width), clamp(pa.y + jitter(), cam_a.height));
        let m = if outlier {
            let xb = rng.random_range(0.0..=(cam_b.width - 1) as f64);
            let yb = rng.random_range(0.0..=(cam_b.height - 1) as f64);
            Match { xa, ya, xb, yb, confidence: 0.1 }
        } else {
            let mut jitter = || if noise_px > 0.0 { noise.sample(rng) } else { 0.0 };
            let (xb, yb) = (clamp(pb.x + jitter(), cam_b.width), clamp(pb.y + jitter(), cam_b.height));
            Match { xa, ya, xb, yb, confidence: 0.9 }
        };
        matches.push(m);
    }
    CorrespondenceSet { view_a: view_a.0.to_string(), view_b: view_b.0.to_string(), matches }
}

/// Appends `count` faint, small random Gaussians inside the box. Returns the
/// index range they occupy.
pub fn plant_floaters<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    count: usize,
    min: [f64; 3],
    max: [f64; 3],
    scale: f64,
    opacity: f64,
    rng: &mut R,
) -> std::ops::Range<usize> {
    let start = cloud.len();
    for _ in 0..count {
        let p = [0, 1, 2].map(|k| rng.random_range(min[k]..max[k]));
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        cloud.push(p, [1.0, 0.0, 0.0, 0.0], [scale.ln(); 3], logit(opacity), rgb.map(rgb_to_feature));
    }
    start..cloud.len()
}

/// Number of Gaussian centers inside the closed box.
pub fn count_in_box(cloud: &GaussianCloud, min: [f64; 3], max: [f64; 3]) -> usize {
    cloud.positions.iter().filter(|p| (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k])).count()
}

/// A small random cloud in front of a 16×16 identity camera, built for
/// finite-difference checks: every splat is wide (10 to 16 px) and faint, so
/// no pixel sits near the opacity clamp, the skip threshold or early
/// termination, and colors stay inside the unclamped range.
pub fn gradient_check_scene(seed: u64, n: usize) -> (GaussianCloud, CameraModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraModel::identity(16.0, 16.0, 7.5, 7.5, 16, 16);
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let (u, v) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
        let z: f64 = rng.random_range(2.0..5.0);
        let p = [(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z];
        let s = [0, 1, 2].map(|_| (rng.random_range(10.0..16.0) * z / cam.fx).ln());
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.1..0.9));
        cloud.push(p, random_unit_quaternion(&mut rng), s, logit(rng.random_range(0.05..0.3)), rgb.map(rgb_to_feature));
    }
    (cloud, cam)
}

/// `image` with every entry moved up or down (random sign) by 0.3 to 0.5, so
/// an L1 comparison against it stays away from its kink.
pub fn offset_target<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Image {
    let mut out = image.clone();
    for v in &mut out.data {
        let m = rng.random_range(0.3..0.5);
        *v += if rng.random_bool(0.5) { m } else { -m };
    }
    out
}

/// Central differences of `loss` with respect to every raw parameter.
pub fn finite_diff_gradients(cloud: &GaussianCloud, loss: impl Fn(&GaussianCloud) -> f64, step: f64) -> GradientBuffer {
    let n = cloud.len();
    let mut g = GradientBuffer::zeros(n);
    let mut work = cloud.clone();
    let diff = |work: &mut GaussianCloud, get: &dyn Fn(&mut GaussianCloud) -> &mut f64| -> f64 {
        let orig = *get(work);
        *get(work) = orig + step;
        let hi = loss(work);
        *get(work) = orig - step;
        let lo = loss(work);
        *get(work) = orig;
        (hi - lo) / (2.0 * step)
    };
    for i in 0..n {
        for k in 0..3 {
            g.d_positions[i][k] = diff(&mut work, &|c| &mut c.positions[i][k]);
            g.d_log_scales[i][k] = diff(&mut work, &|c| &mut c.log_scales[i][k]);
            g.d_colors[i][k] = diff(&mut work, &|c| &mut c.colors[i][k]);
        }
        for k in 0..4 {
            g.d_rotations[i][k] = diff(&mut work, &|c| &mut c.rotations[i][k]);
        }
        g.d_opacity_logits[i] = diff(&mut work, &|c| &mut c.opacity_logits[i]);
    }
    g
}

/// Largest violation of `|a − b| ≤ max(rel·max(|a|, |b|), abs)` over two
/// flattened gradient buffers, reported as (index, analytic, numeric).
pub fn worst_gradient_mismatch(analytic: &GradientBuffer, numeric: &GradientBuffer, rel: f64, abs: f64) -> Option<(usize, f64, f64)> {
    let a = analytic.flatten();
    let b = numeric.flatten();
    assert_eq!(a.len(), b.len());
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    for i in 0..a.len() {
        let tol = (rel * a[i].abs().max(b[i].abs())).max(abs);
        let excess = (a[i] - b[i]).abs() / tol;
        if excess > 1.0 && worst.is_none_or(|w| excess > w.3) {
            worst = Some((i, a[i], b[i], excess));
        }
    }
    worst.map(|(i, x, y, _)| (i, x, y))
}

/// Inputs of the two-layer ablation: the scene, how its correspondences are
/// fabricated and the floater layer planted into every initial cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub scene: SyntheticSceneSpec,
    /// Roughly one match per overlapping pixel, as a dense matcher yields.
    pub matches_per_pair: usize,
    /// Pixel noise of the fabricated matches; `None` keeps the angular
    /// precision of a 0.5 px matcher at a 1000 px focal length.
    pub noise_px: Option<f64>,
    /// Planted floaters, as a fraction of the dense cloud size.
    pub floater_fraction: f64,
    pub floater_min: [f64; 3],
    pub floater_max: [f64; 3],
    pub floater_scale: f64,
    pub floater_opacity: f64,
    pub seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneSpec::two_layer(),
            matches_per_pair: 3000,
            noise_px: None,
            floater_fraction: 0.1,
            floater_min: [-0.8, -0.6, 1.2],
            floater_max: [0.8, 0.6, 2.2],
            floater_scale: 0.05,
            floater_opacity: crate::init::INITIAL_OPACITY,
            seed: 7,
        }
    }
}

impl AblationSpec {
    pub fn noise(&self) -> f64 {
        self.noise_px.unwrap_or(0.5 * self.scene.focal / 1000.0)
    }
}

pub struct AblationFixture {
    pub spec: AblationSpec,
    pub scene: SyntheticScene,
    /// Triangulated cloud followed by the floaters.
    pub dense: GaussianCloud,
    /// Uniform cloud over the scene bounds with the same size and floaters.
    pub random: GaussianCloud,
    pub floaters: usize,
}

impl AblationFixture {
    pub fn new(spec: &AblationSpec) -> Result<Self> {
        let scene = make_scene(&spec.scene)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sets = scene.fabricate_train_correspondences(spec.matches_per_pair, spec.noise(), 0.0, &mut rng);
        let gates = crate::init::TriangulationGates::default();
        let mut dense = crate::init::init_dense(&scene.camera_map(), &scene.images, &sets, &gates)?;
        let (lo, hi) = scene.bounds();
        let mut random = crate::init::init_random(dense.len(), lo, hi, &mut rng)?;
        let floaters = (dense.len() as f64 * spec.floater_fraction).round() as usize;
        for cloud in [&mut dense, &mut random] {
            let mut frng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xf10a7);
            plant_floaters(cloud, floaters, spec.floater_min, spec.floater_max, spec.floater_scale, spec.floater_opacity, &mut frng);
        }
        Ok(Self { spec: spec.clone(), scene, dense, random, floaters })
    }

    /// Gaussians left inside the floater box.
    pub fn floaters_left(&self, cloud: &GaussianCloud) -> usize {
        count_in_box(cloud, self.spec.floater_min, self.spec.floater_max)
    }
}
