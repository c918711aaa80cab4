//! Image quality metrics on the internal `[0, 1]` scale.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videodata::VideoSequence;

/// Reported when the two signals are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window side and Gaussian width.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10 log10(peak^2 / MSE)` over every sample, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Copy + Into<f64>>(a: &[T], b: &[T], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(alloc::format!("psnr: {} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Input("psnr of empty signals".into()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP_DB)
}

/// Normalised 1-D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over every fully-inside window position.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Windowed SSIM of two single-channel `h x w` images with unit dynamic
/// range: 11x11 Gaussian window (sigma 1.5), `k1 = 0.01`, `k2 = 0.03`,
/// population statistics, averaged over every window that fits inside the image.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(alloc::format!("ssim: expected {} samples", h * w)));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(alloc::format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Channel-mean grayscale of frame `t`, row-major `H x W`.
pub fn gray_frame(seq: &VideoSequence, t: usize) -> Vec<f64> {
    let [_, h, w, c] = seq.dims();
    let frame = &seq.data()[t * h * w * c..(t + 1) * h * w * c];
    frame.chunks(c).map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64).collect()
}

/// SSIM of one frame pair; RGB is reduced to grayscale by channel mean.
pub fn ssim(a: &VideoSequence, b: &VideoSequence, t: usize) -> Result<f64> {
    check_same(a, b)?;
    ssim_plane(&gray_frame(a, t), &gray_frame(b, t), a.height(), a.width())
}

fn check_same(a: &VideoSequence, b: &VideoSequence) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(alloc::format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-frame and aggregate quality of `estimate` against `reference`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
    /// Headline numbers: means over frames.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// PSNR of the whole clip from the pooled MSE.
    pub sequence_psnr: f64,
}

pub fn evaluate(estimate: &VideoSequence, reference: &VideoSequence) -> Result<QualityMetrics> {
    check_same(estimate, reference)?;
    let [t, h, w, c] = estimate.dims();
    let n = h * w * c;
    let mut per_frame_psnr = Vec::with_capacity(t);
    let mut per_frame_ssim = Vec::with_capacity(t);
    for k in 0..t {
        let (a, b) = (&estimate.data()[k * n..(k + 1) * n], &reference.data()[k * n..(k + 1) * n]);
        per_frame_psnr.push(psnr(a, b, 1.0)?);
        per_frame_ssim.push(ssim(estimate, reference, k)?);
    }
    Ok(QualityMetrics {
        mean_psnr: per_frame_psnr.iter().sum::<f64>() / t as f64,
        mean_ssim: per_frame_ssim.iter().sum::<f64>() / t as f64,
        sequence_psnr: psnr(estimate.data(), reference.data(), 1.0)?,
        per_frame_psnr,
        per_frame_ssim,
    })
}
