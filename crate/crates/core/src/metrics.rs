//! Image quality metrics.

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape {
            op,
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10·log₁₀(1/MSE)` for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the windows that fit inside the image.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// computed per channel over all fully contained windows and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, w, h, &g);
        let my = filter_valid(&y, w, h, &g);
        let sxx = filter_valid(&prod(&x, &x), w, h, &g);
        let syy = filter_valid(&prod(&y, &y), w, h, &g);
        let sxy = filter_valid(&prod(&x, &y), w, h, &g);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + C1) * (2.0 * cov + C2))
                / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Inclusive-exclusive pixel box `(x0, y0, x1, y1)` around the mask grown by
/// `margin`, widened to at least `min_size` per side where the image allows.
pub fn crop_box(mask: &Mask, margin: usize, min_size: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
        let mut lo = lo.saturating_sub(margin);
        let mut hi = (hi + margin).min(n);
        while hi - lo < min_size.min(n) {
            if lo > 0 {
                lo -= 1;
            }
            if hi - lo < min_size.min(n) && hi < n {
                hi += 1;
            }
        }
        (lo, hi)
    };
    let (x0, x1) = grow(x0, x1, mask.width);
    let (y0, y1) = grow(y0, y1, mask.height);
    Some((x0, y0, x1, y1))
}

pub fn crop(image: &Image, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> Image {
    let mut out = Image::black(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set_pixel(x - x0, y - y0, image.pixel(x, y));
        }
    }
    out
}

/// Full-frame and body-crop scores of a rendering against ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub crop_psnr: f64,
    pub crop_ssim: f64,
}

/// Scores `pred` against `truth`; the crop is the body mask grown by 4 px
/// (the full frame when the mask is empty).
pub fn score(pred: &Image, truth: &Image, mask: &Mask) -> Result<Scores> {
    let (psnr_full, ssim_full) = (psnr(pred, truth)?, ssim(pred, truth)?);
    let (crop_psnr, crop_ssim) = match crop_box(mask, 4, SSIM_WINDOW) {
        Some(b) => {
            let (p, t) = (crop(pred, b), crop(truth, b));
            (psnr(&p, &t)?, ssim(&p, &t)?)
        }
        None => (psnr_full, ssim_full),
    };
    Ok(Scores {
        psnr: psnr_full,
        ssim: ssim_full,
        crop_psnr,
        crop_ssim,
    })
}
