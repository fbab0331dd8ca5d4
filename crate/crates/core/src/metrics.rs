//! Image and mesh metrics.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::morphable::{neutralize, FaceCoefficients, MorphableModel};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_size(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.width, a.height, a.channels, b.width, b.height, b.channels
            ),
        ));
    }
    Ok(())
}

/// PSNR over the pixels where `mask` is set, all channels, peak 1. Returns
/// `+∞` when the masked pixels agree exactly.
pub fn psnr_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    same_size(a, b, "psnr_masked")?;
    if mask.len() != a.width * a.height {
        return Err(Error::shape("psnr_masked", format!("mask has {} entries", mask.len())));
    }
    let c = a.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..c {
            let d = a.data[i * c + k] - b.data[i * c + k];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("PSNR mask selects no pixels".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows of the luma
/// channels, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_size(a, b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (x, y) = (a.to_gray(), b.to_gray());
    let w = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = w[i] * w[j];
                    let idx = (oy + j) * a.width + ox + i;
                    let (p, q) = (x.data[idx], y.data[idx]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean vertex distance between the neutralized meshes of `a` and `b`.
pub fn avd(model: &MorphableModel, a: &FaceCoefficients, b: &FaceCoefficients) -> Result<f64> {
    let va = model.compute_vertices(&neutralize(a))?;
    let vb = model.compute_vertices(&neutralize(b))?;
    let sum: f64 = va.iter().zip(&vb).map(|(p, q)| math::norm(&math::sub(p, q))).sum();
    Ok(sum / va.len() as f64)
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "inf_as_string")]
    pub psnr_masked: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avd_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avd_d: Option<f64>,
}

impl MetricReport {
    pub fn for_images(a: &Image, b: &Image, mask: &[bool]) -> Result<Self> {
        Ok(MetricReport {
            psnr_masked: psnr_masked(a, b, mask)?,
            ssim: ssim(a, b)?,
            avd_s: None,
            avd_d: None,
        })
    }
}
