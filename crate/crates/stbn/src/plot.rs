//! Minimal raster plots written as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};
use stbn_core::blindspot::DependencyMap;
use stbn_core::warp::WarpReport;
use stbn_core::Tensor;

use crate::error::{Error, Result};

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Black-red-yellow-white ramp on `[0, 1]`.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 3.0).min(1.0);
    let g = (v * 3.0 - 1.0).clamp(0.0, 1.0);
    let b = (v * 3.0 - 2.0).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

const GAP: u32 = 2;
const PROBE: Rgb<u8> = Rgb([40, 140, 255]);

/// One panel per source frame, left to right, each pixel drawn as a
/// `zoom x zoom` block. Magnitudes are shown on a log scale spanning six
/// decades below the maximum; exact zeros are black. The probed pixel is
/// outlined in blue on its own frame.
pub fn dependency_heatmap(maps: &[DependencyMap], zoom: u32, path: &Path) -> Result<()> {
    let Some(first) = maps.first() else {
        return Err(Error::Config("no dependency maps to plot".into()));
    };
    let (h, w) = (first.height as u32, first.width as u32);
    let n = maps.len() as u32;
    let mut img = RgbImage::from_pixel(n * w * zoom + (n - 1) * GAP, h * zoom, Rgb([90, 90, 90]));
    let peak = maps.iter().flat_map(|m| m.magnitudes.iter().copied()).fold(0.0, f64::max);
    let floor = peak * 1e-6;
    for (k, m) in maps.iter().enumerate() {
        let x0 = k as u32 * (w * zoom + GAP);
        for y in 0..h {
            for x in 0..w {
                let v = m.at(y as usize, x as usize);
                let level = if v <= 0.0 || peak <= 0.0 {
                    0.0
                } else {
                    (v.max(floor) / floor).log10() / 6.0
                };
                let colour = if v > 0.0 { heat(0.1 + 0.9 * level) } else { heat(0.0) };
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        img.put_pixel(x0 + x * zoom + dx, y * zoom + dy, colour);
                    }
                }
            }
        }
        if m.source_frame == m.probe_location.t {
            let (py, px) = (m.probe_location.y as u32 * zoom, x0 + m.probe_location.x as u32 * zoom);
            for i in 0..zoom {
                img.put_pixel(px + i, py, PROBE);
                img.put_pixel(px + i, py + zoom - 1, PROBE);
                img.put_pixel(px, py + i, PROBE);
                img.put_pixel(px + zoom - 1, py + i, PROBE);
            }
        }
    }
    save(&img, path)
}

/// Observed histogram as grey bars with the expected Gaussian counts as a red trace.
pub fn histogram_plot(report: &WarpReport, path: &Path) -> Result<()> {
    const BAR: u32 = 6;
    const HEIGHT: u32 = 240;
    let bins = report.histogram.len() as u32;
    let mut img = RgbImage::from_pixel(bins * BAR, HEIGHT, Rgb([255, 255, 255]));
    let top = report
        .histogram
        .iter()
        .map(|&c| c as f64)
        .chain(report.histogram_expected.iter().copied())
        .fold(0.0, f64::max)
        .max(1.0);
    let row = |v: f64| HEIGHT - 1 - ((v / top) * (HEIGHT - 1) as f64).round() as u32;
    for (i, (&obs, &exp)) in report.histogram.iter().zip(&report.histogram_expected).enumerate() {
        let x0 = i as u32 * BAR;
        for y in row(obs as f64)..HEIGHT {
            for dx in 0..BAR - 1 {
                img.put_pixel(x0 + dx, y, Rgb([150, 150, 150]));
            }
        }
        let ye = row(exp);
        for dx in 0..BAR {
            for dy in 0..2 {
                img.put_pixel(x0 + dx, (ye + dy).min(HEIGHT - 1), Rgb([220, 30, 30]));
            }
        }
    }
    save(&img, path)
}

/// Pearson correlation of `planes` with itself shifted by `(dy, dx)`.
pub fn autocorrelation(planes: &Tensor, dy: isize, dx: isize) -> f64 {
    let [n, c, h, w] = planes.shape();
    let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for b in 0..n {
        for ch in 0..c {
            let p = planes.channel_plane(b, ch);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let a = p[y as usize * w + x as usize];
                    let q = p[ny as usize * w + nx as usize];
                    sa += a;
                    sb += q;
                    saa += a * a;
                    sbb += q * q;
                    sab += a * q;
                    count += 1.0;
                }
            }
        }
    }
    let cov = sab / count - (sa / count) * (sb / count);
    let va = saa / count - (sa / count).powi(2);
    let vb = sbb / count - (sb / count).powi(2);
    cov / (va * vb).sqrt()
}

/// Autocorrelation over lags `-max_lag..=max_lag` in both axes as a diverging
/// heatmap: red positive, blue negative, white zero. Lag zero is always 1.
pub fn autocorrelation_plot(planes: &Tensor, max_lag: usize, zoom: u32, path: &Path) -> Result<()> {
    let side = 2 * max_lag as u32 + 1;
    let mut img = RgbImage::new(side * zoom, side * zoom);
    let l = max_lag as isize;
    for dy in -l..=l {
        for dx in -l..=l {
            let r = autocorrelation(planes, dy, dx).clamp(-1.0, 1.0);
            let fade = (255.0 * (1.0 - r.abs())) as u8;
            let colour = if r >= 0.0 {
                Rgb([255, fade, fade])
            } else {
                Rgb([fade, fade, 255])
            };
            let (y0, x0) = ((dy + l) as u32 * zoom, (dx + l) as u32 * zoom);
            for i in 0..zoom {
                for j in 0..zoom {
                    img.put_pixel(x0 + j, y0 + i, colour);
                }
            }
        }
    }
    save(&img, path)
}
