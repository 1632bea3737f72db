//! Adaptive-moment optimizer with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::gaussian::GaussianCloud;
use crate::render::GradientBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// Learning rates for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments<const K: usize> {
    m: Vec<[f64; K]>,
    v: Vec<[f64; K]>,
}

impl<const K: usize> Moments<K> {
    fn new(n: usize) -> Self {
        Self { m: vec![[0.0; K]; n], v: vec![[0.0; K]; n] }
    }

    fn update(&mut self, params: &mut [[f64; K]], grads: &[[f64; K]], lr: f64, cfg: &AdamConfig, bc1: f64, bc2: f64) {
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..K {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |src: &[[f64; K]]| origin.iter().map(|o| o.map_or([0.0; K], |i| src[i])).collect();
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    positions: Moments<3>,
    rotations: Moments<4>,
    log_scales: Moments<3>,
    opacities: Moments<1>,
    colors: Moments<3>,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            positions: Moments::new(n),
            rotations: Moments::new(n),
            log_scales: Moments::new(n),
            opacities: Moments::new(n),
            colors: Moments::new(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &GradientBuffer, rates: &GroupRates) {
        assert_eq!(cloud.len(), self.len(), "optimizer state does not match the cloud");
        assert_eq!(grads.len(), self.len(), "gradient buffer does not match the cloud");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let cfg = self.config;
        self.positions.update(&mut cloud.positions, &grads.d_positions, rates.position, &cfg, bc1, bc2);
        self.rotations.update(&mut cloud.rotations, &grads.d_rotations, rates.rotation, &cfg, bc1, bc2);
        self.log_scales.update(&mut cloud.log_scales, &grads.d_log_scales, rates.scale, &cfg, bc1, bc2);
        let opacity = as_arrays_mut(&mut cloud.opacity_logits);
        let d_opacity: Vec<[f64; 1]> = grads.d_opacity_logits.iter().map(|&g| [g]).collect();
        self.opacities.update(opacity, &d_opacity, rates.opacity, &cfg, bc1, bc2);
        self.colors.update(&mut cloud.colors, &grads.d_colors, rates.color, &cfg, bc1, bc2);
    }

    /// Reorders the moments after the cloud changed size. Entries with an
    /// origin keep their moments; new Gaussians start from zero.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        self.positions.remap(origin);
        self.rotations.remap(origin);
        self.log_scales.remap(origin);
        self.opacities.remap(origin);
        self.colors.remap(origin);
    }
}

fn as_arrays_mut(v: &mut [f64]) -> &mut [[f64; 1]] {
    // SAFETY: [f64; 1] has the same size and alignment as f64.
    unsafe { std::slice::from_raw_parts_mut(v.as_mut_ptr().cast::<[f64; 1]>(), v.len()) }
}

/// Log-linear interpolation from `initial` to `final_` over `total` steps.
pub fn exponential_lr(initial: f64, final_: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return initial;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    (initial.ln() * (1.0 - t) + final_.ln() * t).exp()
}
