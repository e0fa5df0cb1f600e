//! PSNR and SSIM on the luminance channel, and method comparison reports.

use std::fmt::Write as _;

use crate::dataset::ImageU8;
use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
pub const PEAK: f64 = 255.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Luminance plane (row-major) of an RGB image.
pub fn luminance(img: &ImageU8) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64)
        .collect()
}

fn same_dims(a: &ImageU8, b: &ImageU8) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::arg(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical luminance.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    same_dims(a, b)?;
    let (la, lb) = (luminance(a), luminance(b));
    let mse = la.iter().zip(&lb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / la.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// Separable Gaussian filter over valid window positions only.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| src[y * w + x + i] * g[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| rows[(y + i) * ow + x] * g[i]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance planes (11x11 Gaussian
/// window, sigma 1.5, valid positions only).
pub fn ssim(a: &ImageU8, b: &ImageU8) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (luminance(a), luminance(b));
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, h, w, &g);
    let mu_y = filter_valid(&y, h, w, &g);
    let xx = filter_valid(&prod(&x, &x), h, w, &g);
    let yy = filter_valid(&prod(&y, &y), h, w, &g);
    let xy = filter_valid(&prod(&x, &y), h, w, &g);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores of one method on a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub scores: Vec<ImageScore>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            scores: Vec::new(),
        }
    }

    pub fn push(&mut self, image: impl Into<String>, output: &ImageU8, truth: &ImageU8) -> Result<()> {
        self.scores.push(ImageScore {
            image: image.into(),
            psnr_db: psnr(output, truth)?,
            ssim: ssim(output, truth)?,
        });
        Ok(())
    }

    /// Mean PSNR over finite values; infinite if every pair was identical.
    pub fn mean_psnr(&self) -> f64 {
        let finite: Vec<f64> = self.scores.iter().map(|s| s.psnr_db).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            if self.scores.is_empty() {
                f64::NAN
            } else {
                f64::INFINITY
            }
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }

    pub fn mean_ssim(&self) -> f64 {
        self.scores.iter().map(|s| s.ssim).sum::<f64>() / self.scores.len() as f64
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// CSV with one row per image and method, then one `mean` row per method.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("image_id,method,psnr_db,ssim\n");
    for r in reports {
        for s in &r.scores {
            let _ = writeln!(out, "{},{},{},{}", s.image, r.method, fmt_value(s.psnr_db), fmt_value(s.ssim));
        }
    }
    for r in reports {
        let _ = writeln!(out, "mean,{},{},{}", r.method, fmt_value(r.mean_psnr()), fmt_value(r.mean_ssim()));
    }
    out
}
