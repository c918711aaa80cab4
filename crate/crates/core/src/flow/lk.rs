//! Dense pyramidal Lucas-Kanade.

use alloc::vec;
use alloc::vec::Vec;

use super::{check_pair, grayscale, FlowEstimator};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::warp::{bilinear_tap, FlowField};

/// Coarse-to-fine Lucas-Kanade with box windows and iterative refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalLk {
    pub levels: usize,
    pub iterations: usize,
    pub window_radius: usize,
    /// Tikhonov term added to the 2x2 structure tensor.
    pub regularization: f64,
    /// Box-filter radius applied to the flow after every update (0 disables).
    pub smoothing_radius: usize,
    /// Passes of 1-2-1 blur applied to each frame before building the pyramid.
    pub presmooth_passes: usize,
}

impl Default for ClassicalLk {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 3,
            window_radius: 4,
            regularization: 1e-4,
            smoothing_radius: 2,
            presmooth_passes: 1,
        }
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (h, w) = ((self.h / 2).max(1), (self.w / 2).max(1));
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (y0, x0) = ((2 * y).min(self.h - 1), (2 * x).min(self.w - 1));
                let (y1, x1) = ((2 * y + 1).min(self.h - 1), (2 * x + 1).min(self.w - 1));
                v[y * w + x] = 0.25 * (self.at(y0, x0) + self.at(y0, x1) + self.at(y1, x0) + self.at(y1, x1));
            }
        }
        Plane { h, w, v }
    }

    /// Separable 1-2-1 smoothing with edge replication.
    fn blur(&self) -> Plane {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.at(y, x.saturating_sub(1));
                let r = self.at(y, (x + 1).min(w - 1));
                tmp[y * w + x] = 0.25 * l + 0.5 * self.at(y, x) + 0.25 * r;
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let u = tmp[y.saturating_sub(1) * w + x];
                let d = tmp[(y + 1).min(h - 1) * w + x];
                v[y * w + x] = 0.25 * u + 0.5 * tmp[y * w + x] + 0.25 * d;
            }
        }
        Plane { h, w, v }
    }

    fn warp(&self, flow: &[f64]) -> Plane {
        let mut v = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let p = y * self.w + x;
                v[p] = bilinear_tap(x, y, flow[2 * p], flow[2 * p + 1], self.h, self.w).sample(&self.v);
            }
        }
        Plane { h: self.h, w: self.w, v }
    }

    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.h, self.w);
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx[y * w + x] = (self.at(y, xr) - self.at(y, xl)) / (xr - xl).max(1) as f64;
                gy[y * w + x] = (self.at(yd, x) - self.at(yu, x)) / (yd - yu).max(1) as f64;
            }
        }
        (gx, gy)
    }
}

/// Box sum over a `(2r + 1)^2` window, clipped at the border, via an integral image.
fn box_sum(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            out[y * w + x] = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
        }
    }
    out
}

fn smooth_flow(flow: &mut [f64], h: usize, w: usize, r: usize) {
    let count = box_sum(&vec![1.0; h * w], h, w, r);
    for k in 0..2 {
        let comp: Vec<f64> = flow.iter().skip(k).step_by(2).copied().collect();
        let summed = box_sum(&comp, h, w, r);
        for p in 0..h * w {
            flow[2 * p + k] = summed[p] / count[p];
        }
    }
}

fn upsample_flow(flow: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (fh, fw) = from;
    let (th, tw) = to;
    let (sy, sx) = (th as f64 / fh as f64, tw as f64 / fw as f64);
    let ay = crate::kernels::resize_axis(fh, th);
    let ax = crate::kernels::resize_axis(fw, tw);
    let mut out = vec![0.0; th * tw * 2];
    for (oy, &(y0, y1, wy)) in ay.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in ax.iter().enumerate() {
            for k in 0..2 {
                let s = |y: usize, x: usize| flow[2 * (y * fw + x) + k];
                let v = (1.0 - wy) * ((1.0 - wx) * s(y0, x0) + wx * s(y0, x1)) + wy * ((1.0 - wx) * s(y1, x0) + wx * s(y1, x1));
                out[2 * (oy * tw + ox) + k] = v * if k == 0 { sx } else { sy };
            }
        }
    }
    out
}

impl ClassicalLk {
    pub fn from_config(config: &super::FlowEstimatorConfig) -> Self {
        Self {
            levels: config.pyramid_levels,
            iterations: config.iterations,
            window_radius: config.window_radius,
            ..Self::default()
        }
    }

    fn refine(&self, a: &Plane, b: &Plane, flow: &mut [f64]) {
        let (h, w) = (a.h, a.w);
        let r = self.window_radius;
        for _ in 0..self.iterations {
            let bw = b.warp(flow);
            let (gbx, gby) = bw.gradients();
            let (gax, gay) = a.gradients();
            let n = h * w;
            let mut ixx = vec![0.0; n];
            let mut ixy = vec![0.0; n];
            let mut iyy = vec![0.0; n];
            let mut ixt = vec![0.0; n];
            let mut iyt = vec![0.0; n];
            for p in 0..n {
                let gx = 0.5 * (gax[p] + gbx[p]);
                let gy = 0.5 * (gay[p] + gby[p]);
                let it = bw.v[p] - a.v[p];
                ixx[p] = gx * gx;
                ixy[p] = gx * gy;
                iyy[p] = gy * gy;
                ixt[p] = gx * it;
                iyt[p] = gy * it;
            }
            let (sxx, sxy, syy) = (box_sum(&ixx, h, w, r), box_sum(&ixy, h, w, r), box_sum(&iyy, h, w, r));
            let (sxt, syt) = (box_sum(&ixt, h, w, r), box_sum(&iyt, h, w, r));
            for p in 0..n {
                let a11 = sxx[p] + self.regularization;
                let a22 = syy[p] + self.regularization;
                let a12 = sxy[p];
                let det = a11 * a22 - a12 * a12;
                if det <= 0.0 || !det.is_finite() {
                    continue;
                }
                // solve A d = -[sxt, syt]
                let dx = -(a22 * sxt[p] - a12 * syt[p]) / det;
                let dy = -(a11 * syt[p] - a12 * sxt[p]) / det;
                // one linearisation step never moves more than a pixel
                flow[2 * p] += dx.clamp(-1.0, 1.0);
                flow[2 * p + 1] += dy.clamp(-1.0, 1.0);
            }
            if self.smoothing_radius > 0 {
                smooth_flow(flow, h, w, self.smoothing_radius);
            }
        }
    }
}

impl FlowEstimator for ClassicalLk {
    fn estimate(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<FlowField> {
        check_pair(frame_a, frame_b)?;
        let (h, w) = (frame_a.h(), frame_a.w());
        let to_plane = |t: &Tensor| Plane {
            h,
            w,
            v: grayscale(t).into_vec(),
        };
        let (mut a, mut b) = (to_plane(frame_a), to_plane(frame_b));
        for _ in 0..self.presmooth_passes {
            a = a.blur();
            b = b.blur();
        }
        let mut pa = vec![a];
        let mut pb = vec![b];
        for _ in 1..self.levels {
            let (la, lb) = (pa.last().unwrap(), pb.last().unwrap());
            if la.h < 8 || la.w < 8 {
                break;
            }
            let (na, nb) = (la.downsample(), lb.downsample());
            pa.push(na);
            pb.push(nb);
        }
        let coarsest = pa.last().unwrap();
        let mut flow = vec![0.0; coarsest.h * coarsest.w * 2];
        let mut size = (coarsest.h, coarsest.w);
        for (a, b) in pa.iter().zip(&pb).rev() {
            if (a.h, a.w) != size {
                flow = upsample_flow(&flow, size, (a.h, a.w));
                size = (a.h, a.w);
            }
            self.refine(a, b, &mut flow);
        }
        let bound = h.max(w) as f64;
        for v in &mut flow {
            *v = v.clamp(-bound, bound);
        }
        FlowField::new(h, w, flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::{add_awgn, NoiseModel, TranslatingTexture};

    #[test]
    fn static_pair_gives_zero_flow() {
        let seq = TranslatingTexture::new(48, 48, 3, (0.0, 0.0), 4, 3).render(1).unwrap();
        let f = seq.frame_tensor(0);
        let flow = ClassicalLk::default().estimate(&f, &f).unwrap();
        let mut mags: Vec<f64> = flow.vectors().chunks(2).map(|v| libm::hypot(v[0], v[1])).collect();
        assert!(crate::warp::median(&mut mags) < 0.05);
    }

    #[test]
    fn recovers_integer_translation() {
        // frame 1 is frame 0 moved right by 3: frame_1(p) = frame_0(p - 3), so
        // estimate(frame_1, frame_0) should be (-3, 0)
        let seq = TranslatingTexture::new(64, 64, 1, (3.0, 0.0), 4, 5).render(2).unwrap();
        let flow = ClassicalLk::default().estimate(&seq.frame_tensor(1), &seq.frame_tensor(0)).unwrap();
        let truth = FlowField::uniform(64, 64, -3.0, 0.0);
        let epe = flow.median_endpoint_error(&truth);
        assert!(epe < 0.5, "median EPE {epe}");
    }

    #[test]
    fn fractional_motion_and_noise() {
        let clean = TranslatingTexture::new(64, 64, 1, (1.5, -1.0), 3, 9).render(2).unwrap();
        let truth = FlowField::uniform(64, 64, -1.5, 1.0);
        let flow = ClassicalLk::default().estimate(&clean.frame_tensor(1), &clean.frame_tensor(0)).unwrap();
        assert!(flow.median_endpoint_error(&truth) < 0.1);
        let noisy = add_awgn(&clean, &NoiseModel::gaussian(25.0, 1).unwrap()).unwrap();
        let flow = ClassicalLk::default().estimate(&noisy.frame_tensor(1), &noisy.frame_tensor(0)).unwrap();
        assert!(flow.median_endpoint_error(&truth) < 1.5);
    }
}
