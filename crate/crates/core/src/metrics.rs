//! Full-reference image quality metrics.

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// Decibels; `+∞` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn mse(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if a.is_empty() {
        return Err(Error::Empty("mse of an empty field"));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr(a: &ScalarField, b: &ScalarField, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid("peak", format!("must be > 0, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid("ssim", format!("needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let k = win[j * SSIM_WINDOW + i];
                    let p = (y0 + j) * w + x0 + i;
                    let (va, vb) = (ad[p], bd[p]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Drops `n` pixels from every border.
pub fn shave(u: &ScalarField, n: usize) -> Result<ScalarField> {
    let (w, h) = u.dims();
    if 2 * n >= w || 2 * n >= h {
        return Err(invalid("shave", format!("{n} pixels leave nothing of a {w}x{h} image")));
    }
    let (sw, sh) = (w - 2 * n, h - 2 * n);
    Ok(ScalarField::from_fn(sw, sh, |x, y| u.get(x + n, y + n)).with_pitch(u.pixel_pitch()))
}

/// Rec.601 luma.
pub fn luminance(r: &ScalarField, g: &ScalarField, b: &ScalarField) -> Result<ScalarField> {
    r.ensure_same_dims(g)?;
    r.ensure_same_dims(b)?;
    let data = r
        .data()
        .iter()
        .zip(g.data())
        .zip(b.data())
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect();
    Ok(r.like(data))
}

/// PSNR (peak 1), SSIM and MSE after shaving `border` pixels.
pub fn evaluate(result: &ScalarField, reference: &ScalarField, border: usize) -> Result<MetricReport> {
    result.ensure_same_dims(reference)?;
    let (a, b) = if border > 0 {
        (shave(result, border)?, shave(reference, border)?)
    } else {
        (result.clone(), reference.clone())
    };
    Ok(MetricReport {
        psnr: psnr(&a, &b, 1.0)?,
        ssim: ssim(&a, &b)?,
        mse: mse(&a, &b)?,
    })
}
