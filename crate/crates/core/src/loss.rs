//! Photometric losses and image-quality metrics.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A scalar loss and its adjoint with respect to the first (rendered) image.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

pub fn l1_loss(rendered: &Image, target: &Image) -> Result<LossValue> {
    rendered.check_same_shape(target, "l1 loss")?;
    let n = rendered.data.len().max(1) as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut sum = 0.0;
    for ((g, &r), &t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossValue { value: sum / n, grad })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - half;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable window filter over one channel plane with reflective borders.
/// With `transpose` the adjoint operator is applied instead.
fn filter_plane(plane: &[f64], w: usize, h: usize, window: &[f64; SSIM_WINDOW], transpose: bool) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    let mut out = vec![0.0; w * h];
    // horizontal
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            for (k, &wk) in window.iter().enumerate() {
                let src = reflect(x as isize + k as isize - half, w);
                if transpose {
                    tmp[y * w + src] += wk * row[x];
                } else {
                    tmp[y * w + x] += wk * row[src];
                }
            }
        }
    }
    // vertical
    for y in 0..h {
        for (k, &wk) in window.iter().enumerate() {
            let src = reflect(y as isize + k as isize - half, h);
            for x in 0..w {
                if transpose {
                    out[src * w + x] += wk * tmp[y * w + x];
                } else {
                    out[y * w + x] += wk * tmp[src * w + x];
                }
            }
        }
    }
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(img.channels).copied().collect()
}

/// Mean SSIM and, if requested, its gradient with respect to `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    x.check_same_shape(y, "ssim")?;
    if x.data.is_empty() {
        return Err(Error::Dimension("ssim of an empty image".into()));
    }
    let (w, h, nc) = (x.width, x.height, x.channels);
    let window = gaussian_window();
    let count = (w * h * nc) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));
    for ch in 0..nc {
        let xp = channel_plane(x, ch);
        let yp = channel_plane(y, ch);
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a * b).collect();
        let mu1 = filter_plane(&xp, w, h, &window, false);
        let mu2 = filter_plane(&yp, w, h, &window, false);
        let e11 = filter_plane(&xx, w, h, &window, false);
        let e22 = filter_plane(&yy, w, h, &window, false);
        let e12 = filter_plane(&xy, w, h, &window, false);

        let mut d_mu1 = vec![0.0; w * h];
        let mut d_e11 = vec![0.0; w * h];
        let mut d_e12 = vec![0.0; w * h];
        for p in 0..w * h {
            let (m1, m2) = (mu1[p], mu2[p]);
            let s11 = e11[p] - m1 * m1;
            let s22 = e22[p] - m2 * m2;
            let s12 = e12[p] - m1 * m2;
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * s12 + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = s11 + s22 + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dmu1 = 2.0 * m2 * a2 / (b1 * b2) - s * 2.0 * m1 / b1;
                let ds_ds12 = 2.0 * a1 / (b1 * b2);
                let ds_ds11 = -s / b2;
                d_mu1[p] = (ds_dmu1 - 2.0 * m1 * ds_ds11 - m2 * ds_ds12) / count;
                d_e11[p] = ds_ds11 / count;
                d_e12[p] = ds_ds12 / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu1 = filter_plane(&d_mu1, w, h, &window, true);
            let g_e11 = filter_plane(&d_e11, w, h, &window, true);
            let g_e12 = filter_plane(&d_e12, w, h, &window, true);
            for p in 0..w * h {
                g.data[p * nc + ch] = g_mu1[p] + 2.0 * xp[p] * g_e11[p] + yp[p] * g_e12[p];
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, unit dynamic range), averaged over channels.
pub fn ssim(rendered: &Image, target: &Image) -> Result<f64> {
    Ok(ssim_impl(rendered, target, false)?.0)
}

/// `(1 − SSIM) / 2` with its adjoint.
pub fn d_ssim(rendered: &Image, target: &Image) -> Result<LossValue> {
    let (s, grad) = ssim_impl(rendered, target, true)?;
    let mut grad = grad.expect("gradient requested");
    for g in &mut grad.data {
        *g *= -0.5;
    }
    Ok(LossValue { value: (1.0 - s) / 2.0, grad })
}

/// `(1 − β)·L1 + β·D-SSIM`.
pub fn color_loss(rendered: &Image, target: &Image, beta: f64) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 0.0 {
        return l1_loss(rendered, target);
    }
    if beta == 1.0 {
        return d_ssim(rendered, target);
    }
    let l1 = l1_loss(rendered, target)?;
    let ds = d_ssim(rendered, target)?;
    let grad = l1.grad.data.iter().zip(&ds.grad.data).map(|(a, b)| (1.0 - beta) * a + beta * b).collect();
    Ok(LossValue {
        value: (1.0 - beta) * l1.value + beta * ds.value,
        grad: Image::from_vec(rendered.width, rendered.height, rendered.channels, grad)?,
    })
}

/// Peak signal-to-noise ratio for unit range; identical images give `+∞`.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.check_same_shape(target, "psnr")?;
    let n = rendered.data.len() as f64;
    let mse = rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
