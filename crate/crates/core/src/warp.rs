//! Backward warping with selectable interpolation, and the statistical audit
//! of what each interpolation does to i.i.d. noise.
//!
//! Warping is always *backward*: `out(p) = in(p + flow(p))`. Sample
//! coordinates that fall outside the image are clamped to the border. In
//! nearest mode coordinates are rounded half away from zero, so each output
//! pixel is an exact copy of one input pixel.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl core::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(Error::Config(alloc::format!("unknown interpolation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    Forward,
    Backward,
}

/// Dense displacement field. `vectors` is `H x W x 2` row-major, each entry `(dx, dy)`
/// in pixels. Sampling `source_frame` at `p + flow(p)` aligns it to `target_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    vectors: Vec<f64>,
    pub direction: FlowDirection,
    pub source_frame: usize,
    pub target_frame: usize,
}

impl FlowField {
    pub fn new(height: usize, width: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != height * width * 2 {
            return Err(Error::Shape(alloc::format!(
                "flow of {height}x{width} needs {} values, got {}",
                height * width * 2,
                vectors.len()
            )));
        }
        let bound = height.max(width) as f64;
        if let Some(v) = vectors.iter().find(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Input(alloc::format!(
                "flow component {v} is not finite or exceeds the {bound} px sanity bound"
            )));
        }
        Ok(Self {
            height,
            width,
            vectors,
            direction: FlowDirection::Forward,
            source_frame: 0,
            target_frame: 0,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let mut vectors = Vec::with_capacity(height * width * 2);
        for _ in 0..height * width {
            vectors.push(dx);
            vectors.push(dy);
        }
        Self {
            height,
            width,
            vectors,
            direction: FlowDirection::Forward,
            source_frame: 0,
            target_frame: 0,
        }
    }

    pub fn with_frames(mut self, direction: FlowDirection, source_frame: usize, target_frame: usize) -> Self {
        self.direction = direction;
        self.source_frame = source_frame;
        self.target_frame = target_frame;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.vectors[i], self.vectors[i + 1])
    }

    /// `[1, 2, H, W]` tensor with channel 0 = dx, channel 1 = dy.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 2 * hw];
        for p in 0..hw {
            data[p] = self.vectors[2 * p];
            data[hw + p] = self.vectors[2 * p + 1];
        }
        Tensor::from_vec([1, 2, self.height, self.width], data).expect("sized above")
    }

    /// Reads batch item `n` of a `[N, 2, H, W]` flow tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        if t.c() != 2 {
            return Err(Error::Shape(alloc::format!("flow tensor needs 2 channels, got {}", t.c())));
        }
        let (h, w) = (t.h(), t.w());
        let dx = t.channel_plane(n, 0);
        let dy = t.channel_plane(n, 1);
        let mut vectors = Vec::with_capacity(2 * h * w);
        for p in 0..h * w {
            vectors.push(dx[p]);
            vectors.push(dy[p]);
        }
        Self::new(h, w, vectors)
    }

    /// Median endpoint error against a reference field.
    pub fn median_endpoint_error(&self, reference: &FlowField) -> f64 {
        let mut errs: Vec<f64> = self
            .vectors
            .chunks(2)
            .zip(reference.vectors.chunks(2))
            .map(|(a, b)| libm::hypot(a[0] - b[0], a[1] - b[1]))
            .collect();
        median(&mut errs)
    }

    /// Mean endpoint error against a reference field.
    pub fn mean_endpoint_error(&self, reference: &FlowField) -> f64 {
        let n = (self.height * self.width) as f64;
        self.vectors
            .chunks(2)
            .zip(reference.vectors.chunks(2))
            .map(|(a, b)| libm::hypot(a[0] - b[0], a[1] - b[1]))
            .sum::<f64>()
            / n
    }

    pub fn max_magnitude(&self) -> f64 {
        self.vectors.chunks(2).map(|v| libm::hypot(v[0], v[1])).fold(0.0, f64::max)
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Source pixel index (row-major) read by each output pixel under nearest
/// warping. Flow components are `dx` and `dy` planes of length `H * W`.
pub fn nearest_sources(dx: &[f64], dy: &[f64], height: usize, width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            // libm::round rounds half away from zero
            let sx = libm::round(x as f64 + dx[p]).clamp(0.0, (width - 1) as f64) as usize;
            let sy = libm::round(y as f64 + dy[p]).clamp(0.0, (height - 1) as f64) as usize;
            out.push(sy * width + sx);
        }
    }
    out
}

/// Bilinear sample location for one output pixel, with clamp-to-edge.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub i00: usize,
    pub i01: usize,
    pub i10: usize,
    pub i11: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the x / y coordinate lies strictly inside the clamp range, so
    /// the sample is differentiable with respect to it.
    pub free_x: bool,
    pub free_y: bool,
}

pub(crate) fn bilinear_tap(x: usize, y: usize, dx: f64, dy: f64, height: usize, width: usize) -> BilinearTap {
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    let raw_x = x as f64 + dx;
    let raw_y = y as f64 + dy;
    let sx = raw_x.clamp(0.0, max_x);
    let sy = raw_y.clamp(0.0, max_y);
    let x0 = libm::floor(sx) as usize;
    let y0 = libm::floor(sy) as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    BilinearTap {
        i00: y0 * width + x0,
        i01: y0 * width + x1,
        i10: y1 * width + x0,
        i11: y1 * width + x1,
        fx: sx - x0 as f64,
        fy: sy - y0 as f64,
        free_x: raw_x >= 0.0 && raw_x <= max_x,
        free_y: raw_y >= 0.0 && raw_y <= max_y,
    }
}

impl BilinearTap {
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let top = plane[self.i00] * (1.0 - self.fx) + plane[self.i01] * self.fx;
        let bottom = plane[self.i10] * (1.0 - self.fx) + plane[self.i11] * self.fx;
        top * (1.0 - self.fy) + bottom * self.fy
    }

    #[inline]
    pub fn weights(&self) -> [(usize, f64); 4] {
        [
            (self.i00, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.i01, self.fx * (1.0 - self.fy)),
            (self.i10, (1.0 - self.fx) * self.fy),
            (self.i11, self.fx * self.fy),
        ]
    }

    /// Partial derivatives of the sample with respect to the x and y coordinates.
    #[inline]
    pub fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let (v00, v01, v10, v11) = (plane[self.i00], plane[self.i01], plane[self.i10], plane[self.i11]);
        let gx = if self.free_x && self.i00 != self.i01 {
            (1.0 - self.fy) * (v01 - v00) + self.fy * (v11 - v10)
        } else {
            0.0
        };
        let gy = if self.free_y && self.i00 != self.i10 {
            (1.0 - self.fx) * (v10 - v00) + self.fx * (v11 - v01)
        } else {
            0.0
        };
        (gx, gy)
    }
}

/// Backward-warp every batch item and channel of `input` (`[N, C, H, W]`) with one flow field.
pub fn warp(input: &Tensor, flow: &FlowField, interpolation: Interpolation) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if flow.height() != h || flow.width() != w {
        return Err(Error::Shape(alloc::format!(
            "flow is {}x{} but input is {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let ft = flow.to_tensor();
    let (dx, dy) = (ft.channel_plane(0, 0), ft.channel_plane(0, 1));
    let mut out = Tensor::zeros([n, c, h, w]);
    let hw = h * w;
    match interpolation {
        Interpolation::Nearest => {
            let src = nearest_sources(dx, dy, h, w);
            for plane in 0..n * c {
                let inp = &input.data()[plane * hw..(plane + 1) * hw];
                let o = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
                for (dst, &s) in o.iter_mut().zip(&src) {
                    *dst = inp[s];
                }
            }
        }
        Interpolation::Bilinear => {
            let taps: Vec<BilinearTap> = (0..hw)
                .map(|p| bilinear_tap(p % w, p / w, dx[p], dy[p], h, w))
                .collect();
            for plane in 0..n * c {
                let inp = &input.data()[plane * hw..(plane + 1) * hw];
                let o = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
                for (dst, tap) in o.iter_mut().zip(&taps) {
                    *dst = tap.sample(inp);
                }
            }
        }
    }
    Ok(out)
}

/// Number of histogram bins in a [`WarpReport`].
pub const HISTOGRAM_BINS: usize = 64;
/// Histogram range in units of the reference sigma.
pub const HISTOGRAM_SPAN_SIGMAS: f64 = 4.0;

/// Statistics of warped i.i.d. noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpReport {
    pub interpolation: Interpolation,
    pub samples: usize,
    pub lag1_autocorr_x: f64,
    pub lag1_autocorr_y: f64,
    pub variance_ratio: f64,
    pub ks_statistic: f64,
    /// Bin edges, `HISTOGRAM_BINS + 1` values spanning `±4 sigma`.
    pub histogram_edges: Vec<f64>,
    /// Counts per bin; samples outside the span are clamped into the end bins.
    pub histogram: Vec<u64>,
    /// Expected counts per bin under `N(0, sigma^2)`.
    pub histogram_expected: Vec<f64>,
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Pearson correlation between horizontally (`along_x`) or vertically adjacent pixels.
pub fn lag1_autocorrelation(planes: &Tensor, along_x: bool) -> f64 {
    let [n, c, h, w] = planes.shape();
    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for b in 0..n {
        for ch in 0..c {
            let p = planes.channel_plane(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = if along_x { (y, x + 1) } else { (y + 1, x) };
                    if ny >= h || nx >= w {
                        continue;
                    }
                    let a = p[y * w + x];
                    let bb = p[ny * w + nx];
                    sa += a;
                    sb += bb;
                    saa += a * a;
                    sbb += bb * bb;
                    sab += a * bb;
                    count += 1.0;
                }
            }
        }
    }
    let cov = sab / count - (sa / count) * (sb / count);
    let va = saa / count - (sa / count) * (sa / count);
    let vb = sbb / count - (sb / count) * (sb / count);
    cov / libm::sqrt(va * vb)
}

pub(crate) fn normal_cdf(x: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / (sigma * core::f64::consts::SQRT_2)))
}

/// Two-sided Kolmogorov-Smirnov statistic of `values` against `N(0, sigma^2)`.
pub fn ks_statistic_normal(values: &[f64], sigma: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal_cdf(v, sigma);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            (f - lo).abs().max((hi - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Warp a field of i.i.d. `N(0, reference_sigma^2)` noise and measure how the
/// interpolation changed its marginal distribution and spatial independence.
pub fn audit_noise_statistics(
    noise: &Tensor,
    flow: &FlowField,
    interpolation: Interpolation,
    reference_sigma: f64,
) -> Result<WarpReport> {
    if reference_sigma.is_nan() || reference_sigma <= 0.0 {
        return Err(Error::Input("reference sigma must be positive".into()));
    }
    if !noise.is_finite() {
        return Err(Error::NonFinite("noise field".into()));
    }
    let first = noise.data().first().copied().unwrap_or(0.0);
    let pre_var = variance(noise.data());
    if noise.data().iter().all(|&v| v == first) || pre_var.is_nan() || pre_var <= 0.0 {
        return Err(Error::Input("degenerate (constant) noise field".into()));
    }
    let warped = warp(noise, flow, interpolation)?;
    let post_var = variance(warped.data());

    let lo = -HISTOGRAM_SPAN_SIGMAS * reference_sigma;
    let hi = HISTOGRAM_SPAN_SIGMAS * reference_sigma;
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let histogram_edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + i as f64 * width).collect();
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for &v in warped.data() {
        let bin = libm::floor((v - lo) / width).clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        histogram[bin] += 1;
    }
    let total = warped.len() as f64;
    let histogram_expected = (0..HISTOGRAM_BINS)
        .map(|i| {
            let a = if i == 0 { f64::NEG_INFINITY } else { histogram_edges[i] };
            let b = if i + 1 == HISTOGRAM_BINS {
                f64::INFINITY
            } else {
                histogram_edges[i + 1]
            };
            let fa = if a.is_infinite() { 0.0 } else { normal_cdf(a, reference_sigma) };
            let fb = if b.is_infinite() { 1.0 } else { normal_cdf(b, reference_sigma) };
            total * (fb - fa)
        })
        .collect();

    Ok(WarpReport {
        interpolation,
        samples: warped.len(),
        lag1_autocorr_x: lag1_autocorrelation(&warped, true),
        lag1_autocorr_y: lag1_autocorrelation(&warped, false),
        variance_ratio: post_var / pre_var,
        ks_statistic: ks_statistic_normal(warped.data(), reference_sigma),
        histogram_edges,
        histogram,
        histogram_expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_vec([1, 1, h, w], (0..h * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity_for_both_modes() {
        let img = ramp(9, 11);
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            assert_eq!(warp(&img, &FlowField::zeros(9, 11), interp).unwrap(), img);
        }
    }

    #[test]
    fn integer_shift_is_a_border_clamped_translation() {
        let img = ramp(8, 10);
        let out = warp(&img, &FlowField::uniform(8, 10, 3.0, 0.0), Interpolation::Nearest).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                assert_eq!(out.at(0, 0, y, x), img.at(0, 0, y, (x + 3).min(9)));
            }
        }
    }

    #[test]
    fn nearest_rounds_half_away_from_zero() {
        let img = ramp(8, 8);
        let out = warp(&img, &FlowField::uniform(8, 8, 0.5, -0.5), Interpolation::Nearest).unwrap();
        // coordinates 4.5 -> 5 and 3.5 -> 4; at the top row -0.5 -> -1 is clamped to 0
        assert_eq!(out.at(0, 0, 4, 4), img.at(0, 0, 4, 5));
        assert_eq!(out.at(0, 0, 0, 0), img.at(0, 0, 0, 1));
    }

    #[test]
    fn bilinear_half_pixel_averages_four_neighbours() {
        let img = ramp(6, 6);
        let out = warp(&img, &FlowField::uniform(6, 6, 0.5, 0.5), Interpolation::Bilinear).unwrap();
        let expected = 0.25 * (img.at(0, 0, 2, 2) + img.at(0, 0, 2, 3) + img.at(0, 0, 3, 2) + img.at(0, 0, 3, 3));
        assert!((out.at(0, 0, 2, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(warp(&ramp(8, 8), &FlowField::zeros(8, 9), Interpolation::Nearest).is_err());
    }

    #[test]
    fn flow_sanity_bound() {
        assert!(FlowField::new(2, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, f64::NAN]).is_err());
        assert!(FlowField::new(2, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn constant_noise_is_degenerate() {
        let noise = Tensor::full([1, 1, 8, 8], 0.3);
        assert!(audit_noise_statistics(&noise, &FlowField::zeros(8, 8), Interpolation::Nearest, 1.0).is_err());
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        // Midpoint quantiles of N(0,1): KS statistic is exactly 1/(2n).
        let n = 200;
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let p = (i as f64 + 0.5) / n as f64;
                // invert by bisection
                let (mut lo, mut hi) = (-10.0, 10.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if normal_cdf(mid, 1.0) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect();
        assert!((ks_statistic_normal(&values, 1.0) - 0.5 / n as f64).abs() < 1e-9);
    }
}
