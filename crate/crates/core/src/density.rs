//! Opacity decay, densification and pruning.

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, quat_to_rotation, GaussianCloud};

/// Opacity floor applied before the logit is recomputed.
pub const OPACITY_FLOOR: f64 = 1e-6;

/// Multiplies every activated opacity by `lambda` and writes it back as a logit.
pub fn opacity_decay(cloud: &mut GaussianCloud, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("decay factor must lie in (0, 1], got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    for i in 0..cloud.len() {
        let a = (lambda * cloud.opacity(i)).max(OPACITY_FLOOR);
        cloud.opacity_logits[i] = logit(a);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean view-space gradient norm that triggers clone or split.
    pub grad_threshold: f64,
    /// Clone rather than split when the largest scale is below this fraction of the scene extent.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    pub interval: usize,
    pub start_iter: usize,
    /// Densification stops at this fraction of the total iteration count.
    pub stop_fraction: f64,
    /// Pure pruning events continue on the same interval until this fraction.
    pub prune_stop_fraction: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            interval: 100,
            start_iter: 500,
            stop_fraction: 0.6,
            prune_stop_fraction: 1.0,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("densify: {m}")));
        if !(self.grad_threshold >= 0.0) {
            return bad("grad_threshold must be non-negative");
        }
        if !(self.percent_dense >= 0.0) {
            return bad("percent_dense must be non-negative");
        }
        if !(self.split_factor > 0.0) {
            return bad("split_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return bad("prune_opacity must lie in [0, 1)");
        }
        if self.interval == 0 {
            return bad("interval must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.stop_fraction) {
            return bad("stop_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.prune_stop_fraction) {
            return bad("prune_stop_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Whether a densification event happens once `completed` iterations of `total` have run.
    pub fn is_due(&self, completed: usize, total: usize) -> bool {
        completed >= self.start_iter
            && completed % self.interval == 0
            && (completed as f64) < self.stop_fraction * total as f64
    }

    /// Whether a prune-only event happens, outside the densification window.
    pub fn is_prune_due(&self, completed: usize, total: usize) -> bool {
        completed >= self.start_iter
            && completed % self.interval == 0
            && !self.is_due(completed, total)
            && (completed as f64) <= self.prune_stop_fraction * total as f64
    }
}

/// Per-Gaussian view-space gradient statistics between densification events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub counts: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_accum: vec![0.0; n], counts: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        self.grad_accum[i] / f64::from(self.counts[i].max(1))
    }
}

/// Rescales pixel-space mean gradients to normalized device coordinates,
/// where one unit spans half the image. The default threshold is calibrated
/// in these units, which make the statistic independent of image resolution.
pub fn ndc_gradients(grads: &[[f64; 2]], width: usize, height: usize) -> Vec<[f64; 2]> {
    let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
    grads.iter().map(|g| [g[0] * sx, g[1] * sy]).collect()
}

/// Adds the norm of each visible Gaussian's screen-space mean gradient.
pub fn accumulate_densify_stats(stats: &mut DensifyStats, grads: &[[f64; 2]], visible: &[bool]) -> Result<()> {
    if grads.len() != stats.len() || visible.len() != stats.len() {
        return Err(Error::Dimension(format!(
            "densify stats track {} Gaussians but got {} gradients and {} visibility flags",
            stats.len(),
            grads.len(),
            visible.len()
        )));
    }
    for i in 0..stats.len() {
        if visible[i] {
            stats.grad_accum[i] += grads[i][0].hypot(grads[i][1]);
            stats.counts[i] += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For every Gaussian of the new cloud, the index it had before the call,
    /// or `None` for Gaussians created by cloning or splitting.
    #[serde(skip)]
    pub origin: Vec<Option<usize>>,
}

/// Clones small and splits large high-gradient Gaussians, then prunes the
/// transparent ones. Surviving originals keep their relative order and come
/// first, followed by clones and then split children. Resets `stats`.
pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &mut GaussianCloud,
    stats: &mut DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut R,
) -> Result<DensifyReport> {
    if stats.len() != cloud.len() {
        return Err(Error::Dimension(format!("densify stats track {} Gaussians, cloud has {}", stats.len(), cloud.len())));
    }
    let n = cloud.len();
    let size_limit = cfg.percent_dense * scene_extent;

    let mut out = GaussianCloud::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    let mut clones = GaussianCloud::new();
    let mut children = GaussianCloud::new();
    let mut split = 0;

    for i in 0..n {
        if stats.mean_grad(i) < cfg.grad_threshold {
            out.push_from(cloud, i);
            origin.push(Some(i));
            continue;
        }
        if cloud.scale(i).max() < size_limit {
            out.push_from(cloud, i);
            origin.push(Some(i));
            let offset = sample_offset(cloud, i, rng);
            clones.push_from(cloud, i);
            let p = clones.positions.last_mut().unwrap();
            for k in 0..3 {
                p[k] += offset[k];
            }
        } else {
            split += 1;
            let shrink = cfg.split_factor.ln();
            for _ in 0..2 {
                let offset = sample_offset(cloud, i, rng);
                children.push_from(cloud, i);
                let last = children.len() - 1;
                for k in 0..3 {
                    children.positions[last][k] += offset[k];
                    children.log_scales[last][k] -= shrink;
                }
            }
        }
    }
    let cloned = clones.len();
    out.extend_from(&clones);
    out.extend_from(&children);
    origin.resize(out.len(), None);

    let keep: Vec<bool> = (0..out.len()).map(|i| out.opacity(i) >= cfg.prune_opacity).collect();
    let pruned = keep.iter().filter(|&&k| !k).count();
    if pruned > 0 {
        out.retain_mask(&keep);
        let mut it = keep.iter();
        origin.retain(|_| *it.next().unwrap());
    }

    *cloud = out;
    stats.reset(cloud.len());
    Ok(DensifyReport { cloned, split, pruned, origin })
}

/// Removes Gaussians below the opacity threshold. Returns the origin map.
pub fn prune(cloud: &mut GaussianCloud, min_opacity: f64) -> Vec<Option<usize>> {
    let keep: Vec<bool> = (0..cloud.len()).map(|i| cloud.opacity(i) >= min_opacity).collect();
    cloud.retain_mask(&keep);
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| Some(i)).collect()
}

/// One draw from the zero-mean Gaussian with the covariance of Gaussian `i`.
fn sample_offset<R: Rng + ?Sized>(cloud: &GaussianCloud, i: usize, rng: &mut R) -> Vector3<f64> {
    let rot = quat_to_rotation(&Vector4::from(cloud.rotations[i]));
    let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    rot * cloud.scale(i).component_mul(&z)
}
