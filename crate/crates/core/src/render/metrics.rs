//! PSNR and SSIM with a peak value of 1.

use crate::error::{Error, Result};
use crate::imaging::Image;

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_sizes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Dimension(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_sizes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len().max(1) as f64)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// PSNR restricted to pixels where `mask` is true.
pub fn masked_psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_sizes(a, b)?;
    if mask.len() != a.pixel_count() {
        return Err(Error::Dimension("mask size".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (a.rgb_f64(i), b.rgb_f64(i));
        for k in 0..3 {
            sum += (x[k] - y[k]).powi(2);
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    if sum == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * (sum / count as f64).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_sizes(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|i| a.data()[i * 3 + ch] as f64).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data()[i * 3 + ch] as f64).collect();
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, gj) in g.iter().enumerate() {
                    let row = (oy + j) * w + ox;
                    for (i, gi) in g.iter().enumerate() {
                        let wt = gj * gi;
                        let (p, q) = (x[row + i], y[row + i]);
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}
