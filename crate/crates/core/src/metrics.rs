//! Image quality metrics. Images are assumed unit-normalized, so the PSNR
//! peak is fixed at 1.0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_PEAK: f64 = 1.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn mse(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.expect_shape(reference.shape())?;
    let n = x.len().max(1) as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB against a peak of 1.0. Identical
/// inputs give `f64::INFINITY`.
pub fn psnr(x: &Tensor, reference: &Tensor) -> Result<f64> {
    psnr_with_peak(x, reference, PSNR_PEAK)
}

pub fn psnr_with_peak(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    let err = mse(x, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            w.push((-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity over all fully-contained 11x11 Gaussian
/// windows (sigma 1.5), averaged over channels.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.expect_shape(reference.shape())?;
    let shape = x.shape();
    if shape.height < SSIM_WINDOW || shape.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            shape.height, shape.width
        )));
    }
    let window = gaussian_window();
    let c1 = (0.01 * PSNR_PEAK).powi(2);
    let c2 = (0.03 * PSNR_PEAK).powi(2);
    let (h, w) = (shape.height, shape.width);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    let mut total = 0.0;
    for c in 0..shape.channels {
        let a = x.channel(c);
        let b = reference.channel(c);
        let mut acc = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let row = (oy + ky) * w + ox;
                    let wrow = &window[ky * SSIM_WINDOW..(ky + 1) * SSIM_WINDOW];
                    for (kx, &g) in wrow.iter().enumerate() {
                        let (va, vb) = (a[row + kx], b[row + kx]);
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / shape.channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

/// PSNR/SSIM as reported for reconstructions: two-channel (complex)
/// images are compared on their magnitude.
pub fn quality(x: &Tensor, reference: &Tensor) -> Result<Quality> {
    let (x, reference) = (x.magnitude(), reference.magnitude());
    let psnr = psnr(&x, &reference)?;
    let ssim = match ssim(&x, &reference) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Quality { psnr, ssim })
}

/// PSNR on magnitude images, the figure reported everywhere else.
pub fn image_psnr(x: &Tensor, reference: &Tensor) -> Result<f64> {
    psnr(&x.magnitude(), &reference.magnitude())
}
