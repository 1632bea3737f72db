//! The optimization loop.
//!
//! Each iteration renders one training view, adds the color loss and, once the
//! consistency phase has started, the stereo consistency loss against a render
//! from a sideways-shifted copy of the same camera. Gradients from both renders
//! are summed, one Adam step is taken, then every opacity is decayed and the
//! densification schedule runs.

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::consistency::{consistency_loss, sample_shift, ConsistencySettings};
use crate::density::{accumulate_densify_stats, densify_and_prune, ndc_gradients, opacity_decay, prune, DensifyConfig, DensifyStats};
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::image::Image;
use crate::loss::{color_loss, psnr, ssim};
use crate::optim::{exponential_lr, Adam, AdamConfig, GroupRates};
use crate::render::{render, render_backward, GradientBuffer, RenderSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { position_init: 1.6e-4, position_final: 1.6e-6, rotation: 1e-3, scale: 5e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// First iteration with the consistency term; `None` means two thirds of the run.
    pub consis_start_iter: Option<usize>,
    /// Weight of D-SSIM inside the color loss.
    pub beta: f64,
    /// Per-iteration opacity decay factor.
    pub decay: f64,
    /// Largest sideways camera shift, in scene units.
    pub d_max: f64,
    pub consis_weight: f64,
    pub consistency: ConsistencySettings,
    /// Back-propagate the consistency loss into the shifted render.
    pub consis_image_grad: bool,
    /// Back-propagate the consistency loss into the depth of the original render.
    pub consis_depth_grad: bool,
    pub lr: LearningRates,
    /// Overrides the extent derived from the training cameras.
    pub scene_extent: Option<f64>,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    pub densify_enabled: bool,
    pub seed: u64,
    pub background: [f64; 3],
    pub render: RenderSettings,
    /// Checkpoint interval in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Held-out evaluation interval in iterations; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            consis_start_iter: None,
            beta: 0.2,
            decay: 0.995,
            d_max: 0.4,
            consis_weight: 1.0,
            consistency: ConsistencySettings::default(),
            consis_image_grad: true,
            consis_depth_grad: true,
            lr: LearningRates::default(),
            scene_extent: None,
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            densify_enabled: true,
            seed: 0,
            background: [0.0; 3],
            render: RenderSettings::default(),
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn consis_start(&self) -> usize {
        self.consis_start_iter.unwrap_or_else(|| (2 * self.total_iters).div_ceil(3))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.d_max > 0.0) {
            return bad(format!("d_max must be positive, got {}", self.d_max));
        }
        if let Some(s) = self.consis_start_iter {
            // a start past the end is how the term is switched off
            if s > self.total_iters && self.total_iters > 0 && s != usize::MAX {
                return bad(format!("consis_start_iter {s} exceeds total_iters {}", self.total_iters));
            }
        }
        if !(self.consis_weight >= 0.0) {
            return bad("consis_weight must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.consistency.alpha_min) {
            return bad("consistency.alpha_min must lie in [0, 1]".into());
        }
        let lr = &self.lr;
        let rates = [lr.position_init, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.color];
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if lr.position_init > 0.0 && !(lr.position_final > 0.0) {
            return bad("position_final must be positive when position_init is".into());
        }
        if let Some(e) = self.scene_extent {
            if !(e > 0.0) {
                return bad(format!("scene_extent must be positive, got {e}"));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps >= 0.0) {
            return bad("adam moments must lie in [0, 1) and eps must be non-negative".into());
        }
        if !(self.render.alpha_clamp > 0.0 && self.render.alpha_clamp < 1.0) {
            return bad("render.alpha_clamp must lie in (0, 1)".into());
        }
        if !(self.render.dilation >= 0.0 && self.render.alpha_skip >= 0.0 && self.render.min_transmittance >= 0.0) {
            return bad("render thresholds must be non-negative".into());
        }
        self.densify.validate()
    }

    /// Disables the consistency term.
    pub fn without_consistency(mut self) -> Self {
        self.consis_start_iter = Some(usize::MAX);
        self
    }
}

/// Radius of the training camera centers around their mean, padded by 10%.
pub fn camera_extent<'a>(cameras: impl IntoIterator<Item = &'a CameraModel>) -> f64 {
    let centers: Vec<Vector3<f64>> = cameras.into_iter().map(|c| c.center()).collect();
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    if radius > 0.0 {
        radius
    } else {
        1.0
    }
}

/// A posed image used for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: String,
    pub camera: CameraModel,
    pub image: Image,
    /// Optional ground-truth depth, used only for evaluation.
    pub depth: Option<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Iter(IterRecord),
    Densify(DensifyRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub view: String,
    pub l_color: f64,
    pub l_consis: Option<f64>,
    pub total: f64,
    pub n_gaussians: usize,
    pub shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyRecord {
    pub iter: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub n_gaussians: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub view: String,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
}

/// Encodes infinities as the strings "inf" / "-inf", which JSON lacks.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected float `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn iterations(&self) -> impl Iterator<Item = &IterRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iter(it) => Some(it),
            _ => None,
        })
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_json_lines(text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::scene::write_file(path, self.to_json_lines().as_bytes())
    }
}

/// Losses and summed raw-parameter gradients for one training view.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub l_color: f64,
    pub l_consis: Option<f64>,
    pub grads: GradientBuffer,
    /// Screen-space mean gradients of the unshifted render.
    pub means2d: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl StepGradients {
    pub fn total(&self) -> f64 {
        self.l_color + self.l_consis.unwrap_or(0.0)
    }
}

/// Evaluates the training objective for one view and back-propagates it.
///
/// With `shift = Some(d)` the consistency term is added using a render from
/// the camera moved by `d` along its own x axis; the reported `l_consis`
/// already includes `config.consis_weight`.
pub fn loss_and_gradients(
    cloud: &GaussianCloud,
    camera: &CameraModel,
    target: &Image,
    shift: Option<f64>,
    config: &TrainConfig,
) -> Result<StepGradients> {
    let (left, left_state) = render(cloud, camera, config.background, &config.render);
    let color = color_loss(&left.color, target, config.beta)?;
    let (w, h) = (camera.width, camera.height);
    let zero_plane = Image::new(w, h, 1);

    let mut l_consis = None;
    let mut d_depth = zero_plane.clone();
    let mut right_grads = None;
    if let Some(d_cam) = shift {
        let right_cam = camera.translate(d_cam);
        let (right, right_state) = render(cloud, &right_cam, config.background, &config.render);
        let c = consistency_loss(target, &right.color, &left.depth, &left.alpha, camera, d_cam, &config.consistency)?;
        let wgt = config.consis_weight;
        l_consis = Some(wgt * c.value);
        if config.consis_depth_grad {
            d_depth = c.d_depth;
            d_depth.data.iter_mut().for_each(|v| *v *= wgt);
        }
        if config.consis_image_grad {
            let mut d_right = c.d_right;
            d_right.data.iter_mut().for_each(|v| *v *= wgt);
            right_grads = Some(render_backward(&right_state, &d_right, &zero_plane, &zero_plane)?);
        }
    }
    let mut grads = render_backward(&left_state, &color.grad, &d_depth, &zero_plane)?;
    let means2d = grads.d_means2d.clone();
    let visible = grads.visible.clone();
    if let Some(r) = right_grads {
        grads.accumulate(&r);
    }
    Ok(StepGradients { l_color: color.value, l_consis, grads, means2d, visible })
}

/// What happened in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub record: IterRecord,
    pub densify: Option<DensifyRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    views: Vec<View>,
    adam: Adam,
    stats: DensifyStats,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    extent: f64,
    iter: usize,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: TrainConfig, cloud: GaussianCloud, views: Vec<View>) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::Config("training needs at least one view".into()));
        }
        if !cloud.is_consistent() || !cloud.all_finite() {
            return Err(Error::Config("initial cloud has inconsistent or non-finite parameters".into()));
        }
        for v in &views {
            if (v.image.width, v.image.height, v.image.channels) != (v.camera.width, v.camera.height, 3) {
                return Err(Error::ImageDimensions {
                    id: v.id.clone(),
                    expected_w: v.camera.width,
                    expected_h: v.camera.height,
                    actual_w: v.image.width,
                    actual_h: v.image.height,
                });
            }
        }
        let extent = config.scene_extent.unwrap_or_else(|| camera_extent(views.iter().map(|v| &v.camera)));
        let n = cloud.len();
        Ok(Self {
            adam: Adam::new(n, config.adam),
            stats: DensifyStats::new(n),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
            extent,
            iter: 0,
            log: TrainLog::default(),
            config,
            cloud,
            views,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn scene_extent(&self) -> f64 {
        self.extent
    }

    pub fn rates(&self, iter: usize) -> GroupRates {
        let lr = &self.config.lr;
        let position = if lr.position_init > 0.0 {
            exponential_lr(lr.position_init, lr.position_final, iter, self.config.total_iters) * self.extent
        } else {
            0.0
        };
        GroupRates { position, rotation: lr.rotation, scale: lr.scale, opacity: lr.opacity, color: lr.color }
    }

    fn next_view(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.iter;
        let vi = self.next_view();
        let shift = (iter >= self.config.consis_start()).then(|| sample_shift(&mut self.rng, self.config.d_max));
        let view = &self.views[vi];
        let g = loss_and_gradients(&self.cloud, &view.camera, &view.image, shift, &self.config)?;
        check_finite(iter, "l_color", g.l_color)?;
        if let Some(c) = g.l_consis {
            check_finite(iter, "l_consis", c)?;
        }

        let rates = self.rates(iter);
        self.adam.step(&mut self.cloud, &g.grads, &rates);
        opacity_decay(&mut self.cloud, self.config.decay)?;
        let cam = &self.views[vi].camera;
        accumulate_densify_stats(&mut self.stats, &ndc_gradients(&g.means2d, cam.width, cam.height), &g.visible)?;

        let record = IterRecord {
            iter,
            view: view.id.clone(),
            l_color: g.l_color,
            l_consis: g.l_consis,
            total: g.total(),
            n_gaussians: self.cloud.len(),
            shift,
        };
        self.log.records.push(LogRecord::Iter(record.clone()));

        self.iter += 1;
        let mut densify = None;
        let (due, total) = (self.iter, self.config.total_iters);
        if self.config.densify_enabled && self.config.densify.is_due(due, total) {
            let report = densify_and_prune(&mut self.cloud, &mut self.stats, &self.config.densify, self.extent, &mut self.rng)?;
            self.adam.remap(&report.origin);
            let rec = DensifyRecord {
                iter,
                cloned: report.cloned,
                split: report.split,
                pruned: report.pruned,
                n_gaussians: self.cloud.len(),
            };
            self.log.records.push(LogRecord::Densify(rec.clone()));
            densify = Some(rec);
        } else if self.config.densify_enabled && self.config.densify.is_prune_due(due, total) {
            let before = self.cloud.len();
            let origin = prune(&mut self.cloud, self.config.densify.prune_opacity);
            self.adam.remap(&origin);
            self.stats.reset(self.cloud.len());
            let rec = DensifyRecord { iter, cloned: 0, split: 0, pruned: before - self.cloud.len(), n_gaussians: self.cloud.len() };
            self.log.records.push(LogRecord::Densify(rec.clone()));
            densify = Some(rec);
        }
        if !self.cloud.all_finite() {
            return Err(Error::NonFiniteLoss { iter, term: "parameters", value: f64::NAN });
        }
        Ok(StepReport { record, densify })
    }

    /// Evaluates held-out views and appends the results to the log.
    pub fn evaluate(&mut self, views: &[View]) -> Result<Vec<EvalRecord>> {
        let mut out = Vec::with_capacity(views.len());
        for v in views {
            let m = evaluate_view(&self.cloud, v, &self.config)?;
            out.push(EvalRecord { iter: self.iter, view: v.id.clone(), psnr: m.psnr, ssim: m.ssim, depth_mae: m.depth_mae });
        }
        self.log.records.extend(out.iter().cloned().map(LogRecord::Eval));
        Ok(out)
    }
}

fn check_finite(iter: usize, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iter, term, value })
    }
}

/// Runs `config.total_iters` iterations. `checkpoint` is called every
/// `config.checkpoint_every` iterations with the completed-iteration count.
pub fn train(
    config: &TrainConfig,
    cloud: GaussianCloud,
    views: Vec<View>,
    held_out: &[View],
    mut checkpoint: impl FnMut(usize, &GaussianCloud) -> Result<()>,
) -> Result<(GaussianCloud, TrainLog)> {
    let mut trainer = Trainer::new(config.clone(), cloud, views)?;
    for _ in 0..config.total_iters {
        trainer.step()?;
        let done = trainer.iteration();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.total_iters {
            checkpoint(done, &trainer.cloud)?;
        }
        if config.eval_every > 0 && done % config.eval_every == 0 && !held_out.is_empty() {
            trainer.evaluate(held_out)?;
        }
    }
    Ok((trainer.cloud, trainer.log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
}

/// Pixels whose rendered alpha must exceed this to enter the depth error.
pub const DEPTH_EVAL_ALPHA: f64 = 0.9;

pub fn evaluate_view(cloud: &GaussianCloud, view: &View, config: &TrainConfig) -> Result<ViewMetrics> {
    let (fb, _) = render(cloud, &view.camera, config.background, &config.render);
    let depth_mae = match &view.depth {
        Some(gt) => depth_error(&fb.depth, gt, &fb.alpha, DEPTH_EVAL_ALPHA)?,
        None => None,
    };
    Ok(ViewMetrics { psnr: psnr(&fb.color, &view.image)?, ssim: ssim(&fb.color, &view.image)?, depth_mae })
}

/// Mean absolute depth difference over pixels with `mask > threshold` and a
/// finite positive reference. `None` when no pixel qualifies.
pub fn depth_error(depth: &Image, reference: &Image, mask: &Image, threshold: f64) -> Result<Option<f64>> {
    depth.check_same_shape(reference, "depth error")?;
    depth.check_same_shape(mask, "depth error mask")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..depth.data.len() {
        let r = reference.data[p];
        if mask.data[p] > threshold && r.is_finite() && r > 0.0 {
            sum += (depth.data[p] - r).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Writes `value` as pretty JSON, for config snapshots next to checkpoints.
pub fn write_config(path: &Path, config: &TrainConfig) -> Result<()> {
    let mut f = Vec::new();
    serde_json::to_writer_pretty(&mut f, config)?;
    writeln!(f).unwrap();
    crate::scene::write_file(path, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::logit;

    fn toy() -> (GaussianCloud, View) {
        let cam = CameraModel::identity(16.0, 16.0, 7.5, 7.5, 16, 16);
        let mut cloud = GaussianCloud::new();
        cloud.push([0.1, -0.1, 3.0], [1.0, 0.0, 0.0, 0.0], [(0.8f64).ln(); 3], logit(0.4), [0.3, -0.2, 0.1]);
        let image = Image::from_fn(16, 16, 3, |r, c, ch| {
            let d2 = (r as f64 - 7.5).powi(2) + (c as f64 - 7.5).powi(2);
            [0.8, 0.4, 0.2][ch] * (-d2 / 40.0).exp()
        });
        (cloud, View { id: "v".into(), camera: cam, image, depth: None })
    }

    fn quiet_config() -> TrainConfig {
        TrainConfig { decay: 1.0, densify_enabled: false, scene_extent: Some(1.0), ..TrainConfig::default() }.without_consistency()
    }

    #[test]
    fn default_consistency_start() {
        let c = TrainConfig { total_iters: 3000, ..TrainConfig::default() };
        assert_eq!(c.consis_start(), 2000);
        let c = TrainConfig { total_iters: 10, ..TrainConfig::default() };
        assert_eq!(c.consis_start(), 7);
        assert_eq!(TrainConfig::default().without_consistency().consis_start(), usize::MAX);
    }

    #[test]
    fn invalid_configs() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { decay: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { decay: 1.01, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta: 1.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { d_max: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { consis_start_iter: Some(5000), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { scene_extent: Some(-1.0), ..ok.clone() }.validate().is_err());
        let bad: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"total_iters": 5, "bogus": 1}"#);
        assert!(bad.is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"total_iters": 5, "decay": 0.99}"#).unwrap();
        assert_eq!((parsed.total_iters, parsed.decay, parsed.beta), (5, 0.99, 0.2));
    }

    #[test]
    fn toy_color_loss_decreases() {
        let (cloud, view) = toy();
        let mut t = Trainer::new(quiet_config(), cloud, vec![view]).unwrap();
        let losses: Vec<f64> = (0..60).map(|_| t.step().unwrap().record.l_color).collect();
        for k in 5..55 {
            assert!(losses[k + 1] < losses[k], "step {k}: {} -> {}", losses[k], losses[k + 1]);
        }
    }

    #[test]
    fn consistency_is_scheduled() {
        let (cloud, view) = toy();
        let config = TrainConfig { total_iters: 6, consis_start_iter: Some(4), densify_enabled: false, ..TrainConfig::default() };
        let (_, log) = train(&config, cloud, vec![view], &[], |_, _| Ok(())).unwrap();
        let its: Vec<&IterRecord> = log.iterations().collect();
        assert_eq!(its.len(), 6);
        for r in &its[..4] {
            assert!(r.l_consis.is_none() && r.shift.is_none());
            assert_eq!(r.total, r.l_color);
        }
        for r in &its[4..] {
            let s = r.shift.unwrap();
            assert!(s.abs() <= 0.4);
            assert!((r.total - (r.l_color + r.l_consis.unwrap())).abs() < 1e-9);
        }
    }

    #[test]
    fn disabled_paths_give_color_only_gradients() {
        let (cloud, view) = toy();
        let mut config = TrainConfig { consis_image_grad: false, consis_depth_grad: false, ..TrainConfig::default() };
        // the toy splat never reaches the default coverage threshold
        config.consistency.alpha_min = 0.0;
        let with = loss_and_gradients(&cloud, &view.camera, &view.image, Some(0.2), &config).unwrap();
        let without = loss_and_gradients(&cloud, &view.camera, &view.image, None, &config).unwrap();
        assert!(with.l_consis.is_some());
        for (a, b) in with.grads.flatten().iter().zip(without.grads.flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
        config.consis_image_grad = true;
        let on = loss_and_gradients(&cloud, &view.camera, &view.image, Some(0.2), &config).unwrap();
        assert!(on.l_consis.unwrap() > 0.0);
        assert_ne!(on.grads.flatten(), without.grads.flatten());
        config.consis_image_grad = false;
        config.consis_depth_grad = true;
        let depth_only = loss_and_gradients(&cloud, &view.camera, &view.image, Some(0.2), &config).unwrap();
        assert_ne!(depth_only.grads.flatten(), without.grads.flatten());
    }

    #[test]
    fn zero_rate_freezes_group() {
        let (cloud, view) = toy();
        let mut config = quiet_config();
        config.lr.scale = 0.0;
        config.lr.rotation = 0.0;
        let mut t = Trainer::new(config, cloud.clone(), vec![view]).unwrap();
        for _ in 0..10 {
            t.step().unwrap();
        }
        assert_eq!(t.cloud.log_scales, cloud.log_scales);
        assert_eq!(t.cloud.rotations, cloud.rotations);
        assert_ne!(t.cloud.colors, cloud.colors);
    }

    #[test]
    fn zero_iterations_return_the_input() {
        let (cloud, view) = toy();
        let config = TrainConfig { total_iters: 0, ..TrainConfig::default() };
        let (out, log) = train(&config, cloud.clone(), vec![view], &[], |_, _| Ok(())).unwrap();
        assert_eq!(out, cloud);
        assert!(log.records.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let (cloud, view) = toy();
        let mut other = view.clone();
        other.id = "w".into();
        other.camera = view.camera.translate(0.2);
        let config = TrainConfig { total_iters: 30, consis_start_iter: Some(10), ..TrainConfig::default() };
        let a = train(&config, cloud.clone(), vec![view.clone(), other.clone()], &[], |_, _| Ok(())).unwrap();
        let b = train(&config, cloud, vec![view, other], &[], |_, _| Ok(())).unwrap();
        assert_eq!(a.1.to_json_lines(), b.1.to_json_lines());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn views_cycle_without_replacement() {
        let (cloud, view) = toy();
        let views: Vec<View> = (0..3).map(|i| View { id: format!("v{i}"), ..view.clone() }).collect();
        let config = TrainConfig { total_iters: 9, ..quiet_config() };
        let (_, log) = train(&config, cloud, views, &[], |_, _| Ok(())).unwrap();
        let ids: Vec<&str> = log.iterations().map(|r| r.view.as_str()).collect();
        for epoch in ids.chunks(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, vec!["v0", "v1", "v2"]);
        }
    }

    #[test]
    fn nan_target_aborts() {
        let (cloud, mut view) = toy();
        view.image.data[5] = f64::NAN;
        let mut t = Trainer::new(quiet_config(), cloud, vec![view]).unwrap();
        let err = t.step().unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iter: 0, term: "l_color", .. }), "{err}");
    }

    #[test]
    fn log_round_trip_with_infinite_psnr() {
        let log = TrainLog {
            records: vec![
                LogRecord::Eval(EvalRecord { iter: 3, view: "a".into(), psnr: f64::INFINITY, ssim: 1.0, depth_mae: None }),
                LogRecord::Densify(DensifyRecord { iter: 2, cloned: 1, split: 0, pruned: 4, n_gaussians: 9 }),
            ],
        };
        let text = log.to_json_lines();
        assert!(text.contains("\"psnr\":\"inf\""));
        assert_eq!(TrainLog::parse_json_lines(&text).unwrap(), log);
    }

    #[test]
    fn depth_error_masks() {
        let d = Image::from_vec(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let r = Image::from_vec(3, 1, 1, vec![1.5, 2.0, f64::INFINITY]).unwrap();
        let m = Image::from_vec(3, 1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(depth_error(&d, &r, &m, 0.9).unwrap(), Some(0.25));
        assert_eq!(depth_error(&d, &r, &Image::new(3, 1, 1), 0.9).unwrap(), None);
    }

    #[test]
    fn extent_from_cameras() {
        let a = CameraModel::identity(10.0, 10.0, 5.0, 5.0, 10, 10);
        let b = a.translate(1.0);
        assert!((camera_extent([&a, &b]) - 0.55).abs() < 1e-12);
        assert_eq!(camera_extent([&a]), 1.0);
    }
}
