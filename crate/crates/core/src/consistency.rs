//! Binocular stereo consistency.
//!
//! A training view is paired with a render from the same camera shifted
//! sideways by `d_cam`. The left view's rendered depth gives a disparity
//! `f·d_cam/D`; the shifted render is warped back with a horizontal bilinear
//! sampler and compared to the ground-truth left image under an L1 penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::error::Result;
use crate::image::Image;

/// Floor applied to depth before division.
pub const DEPTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    /// Signed horizontal pixel offsets.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn compute_disparity(depth: &Image, focal: f64, d_cam: f64, alpha: &Image, alpha_min: f64) -> DisparityMap {
    assert!(focal > 0.0, "focal length must be positive");
    assert_eq!((depth.width, depth.height), (alpha.width, alpha.height), "depth and alpha sizes differ");
    let n = depth.pixel_count();
    let mut values = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for p in 0..n {
        let d = depth.data[p];
        values.push(focal * d_cam / d.max(DEPTH_FLOOR));
        valid.push(alpha.data[p] >= alpha_min && d > DEPTH_FLOOR);
    }
    DisparityMap { width: depth.width, height: depth.height, values, valid }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencySettings {
    /// Pixels whose rendered alpha is below this are ignored. Zero disables the test.
    pub alpha_min: f64,
    /// Clamp samples that fall outside the image instead of masking them.
    pub clamp_border: bool,
}

impl Default for ConsistencySettings {
    fn default() -> Self {
        Self { alpha_min: 0.5, clamp_border: false }
    }
}

/// Result of warping the right image into the left view.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: Image,
    pub mask: Vec<bool>,
}

/// Samples `right` at `(row, col − disparity)`. Samples outside `[0, W−1]`
/// are masked out rather than clamped.
pub fn warp_right_to_left(right: &Image, disparity: &DisparityMap) -> Warped {
    warp_with(right, disparity, false)
}

fn warp_with(right: &Image, disparity: &DisparityMap, clamp_border: bool) -> Warped {
    assert_eq!((right.width, right.height), (disparity.width, disparity.height), "warp size mismatch");
    let (w, h, nc) = (right.width, right.height, right.channels);
    let mut image = Image::new(w, h, nc);
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let Some((x0, x1, t, _)) = sample_site(c, disparity.values[p], w, clamp_border) else { continue };
            if !disparity.valid[p] {
                continue;
            }
            mask[p] = true;
            for ch in 0..nc {
                let v = (1.0 - t) * right.get(r, x0, ch) + t * right.get(r, x1, ch);
                image.set(r, c, ch, v);
            }
        }
    }
    Warped { image, mask }
}

/// Returns the two taps, the weight of the right tap, and whether the sample
/// position still depends on the disparity.
#[inline]
fn sample_site(col: usize, disparity: f64, width: usize, clamp_border: bool) -> Option<(usize, usize, f64, bool)> {
    let hi = (width - 1) as f64;
    let mut x = col as f64 - disparity;
    let mut live = true;
    if !(x >= 0.0 && x <= hi) {
        if !clamp_border || x.is_nan() {
            return None;
        }
        x = x.clamp(0.0, hi);
        live = false;
    }
    let x0 = x.floor();
    let t = x - x0;
    let x0 = x0 as usize;
    Some((x0, (x0 + 1).min(width - 1), t, live))
}

/// Value and adjoints of the consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// Adjoint with respect to the rendered (shifted) right image.
    pub d_right: Image,
    /// Adjoint with respect to the rendered left depth.
    pub d_depth: Image,
    /// Number of pixels that passed the mask.
    pub masked_pixels: usize,
}

/// Mean absolute difference between `left_gt` and the warped right render over
/// the masked pixels. Uses `cam.fx` as the disparity focal length.
pub fn consistency_loss(
    left_gt: &Image,
    right_rendered: &Image,
    depth_left: &Image,
    alpha_left: &Image,
    cam: &CameraModel,
    d_cam: f64,
    settings: &ConsistencySettings,
) -> Result<ConsistencyLoss> {
    left_gt.check_same_shape(right_rendered, "consistency images")?;
    let plane = Image::new(left_gt.width, left_gt.height, 1);
    depth_left.check_same_shape(&plane, "consistency depth")?;
    alpha_left.check_same_shape(&plane, "consistency alpha")?;

    let (w, h, nc) = (left_gt.width, left_gt.height, left_gt.channels);
    let disparity = compute_disparity(depth_left, cam.fx, d_cam, alpha_left, settings.alpha_min);
    let warped = warp_with(right_rendered, &disparity, settings.clamp_border);
    let masked_pixels = warped.mask.iter().filter(|&&m| m).count();

    let mut d_right = Image::new(w, h, nc);
    let mut d_depth = Image::new(w, h, 1);
    if masked_pixels == 0 {
        return Ok(ConsistencyLoss { value: 0.0, d_right, d_depth, masked_pixels });
    }
    let n = (masked_pixels * nc) as f64;
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if !warped.mask[p] {
                continue;
            }
            let (x0, x1, t, live) = sample_site(c, disparity.values[p], w, settings.clamp_border).expect("masked pixel has a sample site");
            let mut d_disp = 0.0;
            for ch in 0..nc {
                let diff = warped.image.get(r, c, ch) - left_gt.get(r, c, ch);
                sum += diff.abs();
                let g = if diff > 0.0 {
                    1.0 / n
                } else if diff < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                };
                let i0 = d_right.index(r, x0, ch);
                let i1 = d_right.index(r, x1, ch);
                d_right.data[i0] += (1.0 - t) * g;
                d_right.data[i1] += t * g;
                if live && x1 != x0 {
                    // sample position moves by −1 per unit of disparity
                    d_disp -= g * (right_rendered.get(r, x1, ch) - right_rendered.get(r, x0, ch));
                }
            }
            let depth = depth_left.data[p];
            d_depth.data[p] = d_disp * (-cam.fx * d_cam / (depth * depth));
        }
    }
    Ok(ConsistencyLoss { value: sum / n, d_right, d_depth, masked_pixels })
}

/// Uniform shift in `[−d_max, d_max]`.
pub fn sample_shift<R: Rng + ?Sized>(rng: &mut R, d_max: f64) -> f64 {
    assert!(d_max > 0.0, "d_max must be positive");
    rng.random_range(-d_max..=d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disparity_examples() {
        let depth = Image::filled(4, 3, 1, 2.0);
        let alpha = Image::filled(4, 3, 1, 1.0);
        let d = compute_disparity(&depth, 100.0, 0.4, &alpha, 0.5);
        assert!(d.values.iter().all(|&v| (v - 20.0).abs() < 1e-12));
        assert!(d.valid.iter().all(|&v| v));
        let d = compute_disparity(&depth, 100.0, 0.0, &alpha, 0.5);
        assert!(d.values.iter().all(|&v| v == 0.0));
        let d = compute_disparity(&depth, 100.0, -0.4, &alpha, 0.5);
        assert!(d.values.iter().all(|&v| (v + 20.0).abs() < 1e-12));
    }

    #[test]
    fn low_alpha_and_zero_depth_are_invalid() {
        let mut depth = Image::filled(3, 1, 1, 2.0);
        depth.data[2] = 0.0;
        let mut alpha = Image::filled(3, 1, 1, 1.0);
        alpha.data[0] = 0.2;
        let d = compute_disparity(&depth, 50.0, 0.1, &alpha, 0.5);
        assert_eq!(d.valid, vec![false, true, false]);
        assert!(d.values.iter().all(|v| v.is_finite()));
    }

    fn uniform_disparity(w: usize, h: usize, v: f64) -> DisparityMap {
        DisparityMap { width: w, height: h, values: vec![v; w * h], valid: vec![true; w * h] }
    }

    #[test]
    fn zero_disparity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(9, 5, 3, |_, _, _| rng.random_range(0.0..1.0));
        let out = warp_right_to_left(&img, &uniform_disparity(9, 5, 0.0));
        assert_eq!(out.image, img);
        assert!(out.mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_shift_of_a_ramp() {
        let w = 10;
        let ramp = Image::from_fn(w, 3, 1, |_, c, _| c as f64 / w as f64);
        let out = warp_right_to_left(&ramp, &uniform_disparity(w, 3, 2.0));
        for r in 0..3 {
            for c in 0..w {
                if c < 2 {
                    assert!(!out.mask[r * w + c]);
                } else {
                    assert!(out.mask[r * w + c]);
                    assert_eq!(out.image.get(r, c, 0), (c - 2) as f64 / w as f64);
                }
            }
        }
    }

    #[test]
    fn constant_image_is_warp_invariant() {
        let img = Image::filled(12, 4, 3, 0.37);
        let mut disp = uniform_disparity(12, 4, 0.0);
        for (i, v) in disp.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.77).sin() * 5.0;
        }
        let out = warp_right_to_left(&img, &disp);
        for p in 0..48 {
            if out.mask[p] {
                for ch in 0..3 {
                    assert!((out.image.data[3 * p + ch] - 0.37).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn constant_pair_has_zero_loss() {
        let img = Image::filled(12, 6, 3, 0.6);
        let depth = Image::filled(12, 6, 1, 3.0);
        let alpha = Image::filled(12, 6, 1, 1.0);
        let cam = CameraModel::identity(30.0, 30.0, 6.0, 3.0, 12, 6);
        for d_cam in [-0.4, 0.1, 0.4] {
            let l = consistency_loss(&img, &img, &depth, &alpha, &cam, d_cam, &ConsistencySettings::default()).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn empty_mask_gives_zero() {
        let img = Image::filled(6, 2, 3, 0.6);
        let depth = Image::filled(6, 2, 1, 3.0);
        let alpha = Image::new(6, 2, 1);
        let cam = CameraModel::identity(30.0, 30.0, 3.0, 1.0, 6, 2);
        let l = consistency_loss(&img, &Image::new(6, 2, 3), &depth, &alpha, &cam, 0.3, &ConsistencySettings::default()).unwrap();
        assert_eq!((l.value, l.masked_pixels), (0.0, 0));
        assert!(l.d_right.data.iter().chain(&l.d_depth.data).all(|&v| v == 0.0));
    }

    #[test]
    fn masked_columns_do_not_influence_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (16, 4);
        let left = Image::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0));
        let right = Image::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0));
        let depth = Image::filled(w, h, 1, 2.0);
        let alpha = Image::filled(w, h, 1, 1.0);
        let cam = CameraModel::identity(20.0, 20.0, 8.0, 2.0, w, h);
        // disparity 20·0.4/2 = 4: sample columns c − 4 never exceed w − 5
        let base = consistency_loss(&left, &right, &depth, &alpha, &cam, 0.4, &ConsistencySettings::default()).unwrap();
        let mut scribbled = right.clone();
        for r in 0..h {
            for c in w - 3..w {
                for ch in 0..3 {
                    scribbled.set(r, c, ch, 42.0);
                }
            }
        }
        let other = consistency_loss(&left, &scribbled, &depth, &alpha, &cam, 0.4, &ConsistencySettings::default()).unwrap();
        assert_eq!(base.value, other.value);
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (16, 16);
        let left = Image::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0));
        let right = Image::from_fn(w, h, 3, |_, _, _| rng.random_range(0.0..1.0));
        let depth = Image::from_fn(w, h, 1, |_, _, _| rng.random_range(2.0..4.0));
        let alpha = Image::filled(w, h, 1, 1.0);
        let cam = CameraModel::identity(20.0, 20.0, 8.0, 8.0, w, h);
        let d_cam = 0.3;
        let f = |r: &Image, d: &Image| consistency_loss(&left, r, d, &alpha, &cam, d_cam, &ConsistencySettings::default()).unwrap();
        let base = f(&right, &depth);
        let step = 1e-6;
        let check = |fd: f64, a: f64, what: &str| {
            let err = (fd - a).abs();
            assert!(err <= 1e-3 * fd.abs().max(a.abs()) || err <= 1e-6, "{what}: fd {fd} vs analytic {a}");
        };
        for i in 0..right.data.len() {
            let mut hi = right.clone();
            let mut lo = right.clone();
            hi.data[i] += step;
            lo.data[i] -= step;
            check((f(&hi, &depth).value - f(&lo, &depth).value) / (2.0 * step), base.d_right.data[i], "right");
        }
        for i in 0..depth.data.len() {
            let mut hi = depth.clone();
            let mut lo = depth.clone();
            hi.data[i] += step;
            lo.data[i] -= step;
            check((f(&right, &hi).value - f(&right, &lo).value) / (2.0 * step), base.d_depth.data[i], "depth");
        }
    }

    #[test]
    fn clamped_border_keeps_every_valid_pixel() {
        let w = 10;
        let ramp = Image::from_fn(w, 2, 3, |_, c, _| c as f64);
        let depth = Image::filled(w, 2, 1, 1.0);
        let alpha = Image::filled(w, 2, 1, 1.0);
        let cam = CameraModel::identity(10.0, 10.0, 5.0, 1.0, w, 2);
        let settings = ConsistencySettings { alpha_min: 0.5, clamp_border: true };
        // disparity 3 px; clamped columns read column 0
        let l = consistency_loss(&ramp, &ramp, &depth, &alpha, &cam, 0.3, &settings).unwrap();
        assert_eq!(l.masked_pixels, 2 * w);
        let masked = consistency_loss(&ramp, &ramp, &depth, &alpha, &cam, 0.3, &ConsistencySettings::default()).unwrap();
        assert_eq!(masked.masked_pixels, 2 * (w - 3));
    }

    #[test]
    fn shift_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f64> = (0..100_000).map(|_| sample_shift(&mut rng, 0.4)).collect();
        assert!(samples.iter().all(|s| (-0.4..=0.4).contains(s)));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 0.01);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(sample_shift(&mut a, 0.1).to_bits(), sample_shift(&mut b, 0.1).to_bits());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..10_000).map(|_| sample_shift(&mut rng, 0.1)).all(|s| (-0.1..=0.1).contains(&s)));
    }
}
