//! Raw numeric kernels shared by the autodiff graph: tap-list convolution,
//! pixel (un)shuffle, resampling.

use alloc::vec;
use alloc::vec::Vec;

/// Geometry of a tap-list convolution.
///
/// A convolution is described by the list of spatial offsets `(dy, dx)` it
/// reads. A centrally-masked kernel is a tap list without `(0, 0)`; a dilated
/// kernel is a tap list on a coarser lattice. Out-of-image taps read zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub taps: Vec<(i32, i32)>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvGeom {
    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    #[inline]
    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Row length of the weight matrix: `in_per_group * taps`.
    #[inline]
    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.taps.len()
    }

    fn is_pointwise(&self) -> bool {
        self.taps.len() == 1 && self.taps[0] == (0, 0)
    }
}

/// Square `k x k` kernel taps with the given dilation, optionally without the center.
pub fn square_taps(kernel: usize, dilation: usize, masked_center: bool) -> Vec<(i32, i32)> {
    let r = (kernel / 2) as i32;
    let d = dilation as i32;
    let mut taps = Vec::with_capacity(kernel * kernel);
    for dy in -r..=r {
        for dx in -r..=r {
            if masked_center && dy == 0 && dx == 0 {
                continue;
            }
            taps.push((dy * d, dx * d));
        }
    }
    taps
}

fn im2col(x: &[f64], h: usize, w: usize, channels: usize, taps: &[(i32, i32)], cols: &mut [f64]) {
    let hw = h * w;
    let nt = taps.len();
    for ci in 0..channels {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for (k, &(dy, dx)) in taps.iter().enumerate() {
            let row = &mut cols[(ci * nt + k) * hw..(ci * nt + k + 1) * hw];
            for y in 0..h {
                let sy = y as i32 + dy;
                let out = &mut row[y * w..(y + 1) * w];
                if sy < 0 || sy >= h as i32 {
                    out.fill(0.0);
                    continue;
                }
                let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                // valid x range: 0 <= x + dx < w
                let x0 = (-dx).clamp(0, w as i32) as usize;
                let x1 = (w as i32 - dx).clamp(0, w as i32) as usize;
                out[..x0].fill(0.0);
                out[x1..].fill(0.0);
                if x0 < x1 {
                    let s0 = (x0 as i32 + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], h: usize, w: usize, channels: usize, taps: &[(i32, i32)], dx_out: &mut [f64]) {
    let hw = h * w;
    let nt = taps.len();
    for ci in 0..channels {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for (k, &(dy, dx)) in taps.iter().enumerate() {
            let row = &cols[(ci * nt + k) * hw..(ci * nt + k + 1) * hw];
            for y in 0..h {
                let sy = y as i32 + dy;
                if sy < 0 || sy >= h as i32 {
                    continue;
                }
                let x0 = (-dx).clamp(0, w as i32) as usize;
                let x1 = (w as i32 - dx).clamp(0, w as i32) as usize;
                if x0 >= x1 {
                    continue;
                }
                let s0 = (x0 as i32 + dx) as usize;
                let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                for (d, g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                    *d += g;
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the debug assertions above document the extents; every caller
    // passes slices sized exactly for the described strided matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Forward convolution. `x` is `[n, cin, h, w]`, `weight` is `[cout, cin/groups * taps]`
/// row-major, output is `[n, cout, h, w]`.
pub fn conv_forward(
    geom: &ConvGeom,
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hw = h * w;
    let cin_g = geom.in_per_group();
    let cout_g = geom.out_per_group();
    let fan = geom.fan_in();
    let mut out = vec![0.0; n * geom.out_channels * hw];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; fan * hw]
    };
    for b in 0..n {
        for g in 0..geom.groups {
            let xin = &x[(b * geom.in_channels + g * cin_g) * hw..(b * geom.in_channels + (g + 1) * cin_g) * hw];
            let colsref: &[f64] = if geom.is_pointwise() {
                xin
            } else {
                im2col(xin, h, w, cin_g, &geom.taps, &mut cols);
                &cols
            };
            let o0 = (b * geom.out_channels + g * cout_g) * hw;
            let out_g = &mut out[o0..o0 + cout_g * hw];
            if let Some(bias) = bias {
                for (o, row) in out_g.chunks_mut(hw).enumerate() {
                    row.fill(bias[g * cout_g + o]);
                }
            }
            gemm(
                cout_g,
                fan,
                hw,
                &weight[g * cout_g * fan..(g + 1) * cout_g * fan],
                fan,
                1,
                colsref,
                hw,
                1,
                if bias.is_some() { 1.0 } else { 0.0 },
                out_g,
                hw,
            );
        }
    }
    out
}

/// Backward convolution: accumulates into `dx`, `dw`, `db` when present.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let hw = h * w;
    let cin_g = geom.in_per_group();
    let cout_g = geom.out_per_group();
    let fan = geom.fan_in();
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; fan * hw] };
    let mut dcols = vec![0.0; fan * hw];
    for b in 0..n {
        for g in 0..geom.groups {
            let i0 = (b * geom.in_channels + g * cin_g) * hw;
            let o0 = (b * geom.out_channels + g * cout_g) * hw;
            let dout_g = &dout[o0..o0 + cout_g * hw];
            if let Some(db) = db.as_deref_mut() {
                for (o, row) in dout_g.chunks(hw).enumerate() {
                    db[g * cout_g + o] += row.iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xin = &x[i0..i0 + cin_g * hw];
                let colsref: &[f64] = if pointwise {
                    xin
                } else {
                    im2col(xin, h, w, cin_g, &geom.taps, &mut cols);
                    &cols
                };
                // dW[cout_g x fan] += dOut[cout_g x hw] * cols^T[hw x fan]
                gemm(
                    cout_g,
                    hw,
                    fan,
                    dout_g,
                    hw,
                    1,
                    colsref,
                    1,
                    hw,
                    1.0,
                    &mut dw[g * cout_g * fan..(g + 1) * cout_g * fan],
                    fan,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dCols[fan x hw] = W^T[fan x cout_g] * dOut[cout_g x hw]
                let wg = &weight[g * cout_g * fan..(g + 1) * cout_g * fan];
                let dx_g = &mut dx[i0..i0 + cin_g * hw];
                if pointwise {
                    gemm(fan, cout_g, hw, wg, 1, fan, dout_g, hw, 1, 1.0, dx_g, hw);
                } else {
                    gemm(fan, cout_g, hw, wg, 1, fan, dout_g, hw, 1, 0.0, &mut dcols, hw);
                    col2im_add(&dcols, h, w, cin_g, &geom.taps, dx_g);
                }
            }
        }
    }
}

/// Space-to-channel rearrangement. Output channel `c * s^2 + dy * s + dx` at
/// coarse cell `(Y, X)` holds input channel `c` at `(Y * s + dy, X * s + dx)`.
pub fn unshuffle(x: &[f64], n: usize, c: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let oc = ci * s * s + dy * s + dx;
                    let obase = (b * c * s * s + oc) * oh * ow;
                    let ibase = (b * c + ci) * h * w;
                    for yy in 0..oh {
                        for xx in 0..ow {
                            out[obase + yy * ow + xx] = x[ibase + (yy * s + dy) * w + xx * s + dx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`unshuffle`]: `x` is `[n, c * s^2, h, w]`, output `[n, c, h * s, w * s]`.
pub fn shuffle(x: &[f64], n: usize, c: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let ic = ci * s * s + dy * s + dx;
                    let ibase = (b * c * s * s + ic) * h * w;
                    let obase = (b * c + ci) * oh * ow;
                    for yy in 0..h {
                        for xx in 0..w {
                            out[obase + (yy * s + dy) * ow + xx * s + dx] = x[ibase + yy * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reflect index `i` into `[0, len)` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// One axis of a bilinear resize (align_corners = false, edge clamped):
/// for each output index, the two source indices and the weight of the second.
pub fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = libm::floor(s) as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
