//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that (transitively) depends on a parameter or a differentiable
//! input. Constants never receive gradients, which is how stop-gradient is
//! expressed.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::nn::ParamId;
use crate::tensor::Tensor;
use crate::warp::{bilinear_tap, BilinearTap};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Rc<ConvGeom>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleChannels(Var, Rc<Vec<f64>>),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GatherChannels(Var, Rc<Vec<usize>>),
    Unshuffle(Var, usize),
    Shuffle(Var, usize),
    ReflectPad(Var),
    Crop(Var),
    WarpNearest(Var, Rc<Vec<usize>>),
    WarpBilinear {
        x: Var,
        flow: Var,
        taps: Rc<Vec<BilinearTap>>,
    },
    AvgPool2(Var),
    Resize(Var),
    Clamp(Var, f64, f64),
    Mse(Var, Rc<Tensor>),
    GaussianNll {
        mu: Var,
        log_var: Var,
        target: Rc<Tensor>,
        noise_var: f64,
    },
    L1(Var, Var),
    Smoothness(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (e.g. a probed input).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter leaf; gradients are reported through [`Grads::params`].
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> Var {
        let v = self.push(value.clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    /// Copy of the value with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: Rc<ConvGeom>) -> Result<Var> {
        let [n, c, h, wd] = self.shape(x);
        if c != geom.in_channels {
            return Err(shape_err(alloc::format!(
                "conv expects {} input channels, got {c}",
                geom.in_channels
            )));
        }
        let expected_w = geom.out_channels * geom.fan_in();
        if self.value(w).len() != expected_w {
            return Err(shape_err(alloc::format!(
                "conv weight has {} values, expected {expected_w}",
                self.value(w).len()
            )));
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            n,
            h,
            wd,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec([n, geom.out_channels, h, wd], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(alloc::format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// Multiplies channel `c` by `factors[c]`.
    pub fn scale_channels(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let [n, c, h, w] = self.shape(a);
        if factors.len() != c {
            return Err(shape_err(alloc::format!("{} channel factors for {c} channels", factors.len())));
        }
        let mut value = self.value(a).clone();
        let hw = h * w;
        for b in 0..n {
            for (ci, k) in factors.iter().enumerate() {
                let s = (b * c + ci) * hw;
                for v in &mut value.data_mut()[s..s + hw] {
                    *v *= k;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::ScaleChannels(a, Rc::new(factors)), ng))
    }

    /// Leaky ReLU; `slope = 0` gives a plain ReLU.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), ng)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(alloc::format!(
                    "concat: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.c() * hw;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::from_vec([n, total_c, h, w], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c {
            return Err(shape_err(alloc::format!("channel slice {start}+{len} of {c}")));
        }
        let hw = h * w;
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            data.extend_from_slice(&src.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let value = Tensor::from_vec([n, len, h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, ng))
    }

    /// Output channel `j` is input channel `perm[j]`.
    pub fn gather_channels(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if perm.iter().any(|&p| p >= c) {
            return Err(shape_err("gather index out of range".into()));
        }
        let hw = h * w;
        let src = self.value(x);
        let mut data = Vec::with_capacity(n * perm.len() * hw);
        for b in 0..n {
            for &p in &perm {
                data.extend_from_slice(&src.data()[(b * c + p) * hw..(b * c + p + 1) * hw]);
            }
        }
        let value = Tensor::from_vec([n, perm.len(), h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::GatherChannels(x, Rc::new(perm)), ng))
    }

    pub fn unshuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(shape_err(alloc::format!("{h}x{w} not divisible by {s}")));
        }
        let data = kernels::unshuffle(self.value(x).data(), n, c, h, w, s);
        let value = Tensor::from_vec([n, c * s * s, h / s, w / s], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Unshuffle(x, s), ng))
    }

    pub fn shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if s == 0 || c % (s * s) != 0 {
            return Err(shape_err(alloc::format!("{c} channels not divisible by {s}^2")));
        }
        let data = kernels::shuffle(self.value(x).data(), n, c / (s * s), h, w, s);
        let value = Tensor::from_vec([n, c / (s * s), h * s, w * s], data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Shuffle(x, s), ng))
    }

    /// Reflect-pads the bottom and right edges up to `out_h x out_w`.
    pub fn reflect_pad(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if out_h < h || out_w < w {
            return Err(shape_err("reflect_pad cannot shrink".into()));
        }
        if out_h == h && out_w == w {
            return Ok(x);
        }
        let src = self.value(x);
        let mut value = Tensor::zeros([n, c, out_h, out_w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..out_h {
                    let sy = kernels::reflect_index(y, h);
                    for xx in 0..out_w {
                        let sx = kernels::reflect_index(xx, w);
                        value.set(b, ch, y, xx, src.at(b, ch, sy, sx));
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::ReflectPad(x), ng))
    }

    /// Keeps the top-left `out_h x out_w` window.
    pub fn crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if out_h > h || out_w > w {
            return Err(shape_err("crop larger than input".into()));
        }
        if out_h == h && out_w == w {
            return Ok(x);
        }
        let src = self.value(x);
        let mut value = Tensor::zeros([n, c, out_h, out_w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..out_h {
                    for xx in 0..out_w {
                        value.set(b, ch, y, xx, src.at(b, ch, y, xx));
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::Crop(x), ng))
    }

    /// Nearest-neighbour backward warp; `flow` values are treated as constants
    /// (the rounding is piecewise constant, so no gradient reaches the flow).
    pub fn warp_nearest(&mut self, x: Var, flow: &Tensor) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if flow.shape() != [n, 2, h, w] {
            return Err(shape_err(alloc::format!(
                "warp flow {:?} for input {:?}",
                flow.shape(),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let mut src = Vec::with_capacity(n * hw);
        for b in 0..n {
            src.extend(crate::warp::nearest_sources(
                flow.channel_plane(b, 0),
                flow.channel_plane(b, 1),
                h,
                w,
            ));
        }
        let input = self.value(x);
        let mut value = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let idx = &src[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let inp = input.channel_plane(b, ch);
                let base = (b * c + ch) * hw;
                let out = &mut value.data_mut()[base..base + hw];
                for (o, &s) in out.iter_mut().zip(idx) {
                    *o = inp[s];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::WarpNearest(x, Rc::new(src)), ng))
    }

    /// Bilinear backward warp, differentiable in both the input and the flow.
    pub fn warp_bilinear(&mut self, x: Var, flow: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(flow) != [n, 2, h, w] {
            return Err(shape_err(alloc::format!(
                "warp flow {:?} for input {:?}",
                self.shape(flow),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let f = self.value(flow);
        let mut taps = Vec::with_capacity(n * hw);
        for b in 0..n {
            let (dx, dy) = (f.channel_plane(b, 0), f.channel_plane(b, 1));
            for p in 0..hw {
                taps.push(bilinear_tap(p % w, p / w, dx[p], dy[p], h, w));
            }
        }
        let input = self.value(x);
        let mut value = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let inp = input.channel_plane(b, ch);
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    value.data_mut()[base + p] = taps[b * hw + p].sample(inp);
                }
            }
        }
        let ng = self.ng(x) || self.ng(flow);
        Ok(self.push(
            value,
            Op::WarpBilinear {
                x,
                flow,
                taps: Rc::new(taps),
            },
            ng,
        ))
    }

    /// 2x2 average pooling (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x);
        let mut value = Tensor::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = src.at(b, ch, 2 * y, 2 * xx)
                            + src.at(b, ch, 2 * y, 2 * xx + 1)
                            + src.at(b, ch, 2 * y + 1, 2 * xx)
                            + src.at(b, ch, 2 * y + 1, 2 * xx + 1);
                        value.set(b, ch, y, xx, 0.25 * s);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::AvgPool2(x), ng)
    }

    /// Bilinear resize (align_corners = false).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        let ay = kernels::resize_axis(h, out_h);
        let ax = kernels::resize_axis(w, out_w);
        let src = self.value(x);
        let mut value = Tensor::zeros([n, c, out_h, out_w]);
        for b in 0..n {
            for ch in 0..c {
                let p = src.channel_plane(b, ch);
                for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                        let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                        value.set(b, ch, oy, ox, top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::Resize(x), ng)
    }

    /// Elementwise clamp; gradient passes only where the input is inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(value, Op::Clamp(x, lo, hi), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(alloc::format!(
                "mse: {:?} vs {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let p = self.value(pred);
        let m = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(m), Op::Mse(pred, Rc::new(target.clone())), ng))
    }

    /// Mean Gaussian negative log-likelihood of `target` under
    /// `N(mu, exp(log_var) + noise_var)`, constant term dropped.
    pub fn gaussian_nll(&mut self, mu: Var, log_var: Var, target: &Tensor, noise_var: f64) -> Result<Var> {
        self.same_shape(mu, log_var, "gaussian_nll")?;
        if self.shape(mu) != target.shape() {
            return Err(shape_err("gaussian_nll target shape".into()));
        }
        let value = crate::train::loss::gaussian_nll_value(
            self.value(mu).data(),
            self.value(log_var).data(),
            target.data(),
            noise_var,
        );
        let ng = self.ng(mu) || self.ng(log_var);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GaussianNll {
                mu,
                log_var,
                target: Rc::new(target.clone()),
                noise_var,
            },
            ng,
        ))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let m = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / self.value(a).len() as f64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(m), Op::L1(a, b), ng))
    }

    /// Mean absolute first difference along x and y (first-order smoothness).
    pub fn smoothness(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let t = self.value(x);
        let mut s = 0.0;
        for b in 0..n {
            for ch in 0..c {
                let p = t.channel_plane(b, ch);
                for y in 0..h {
                    for xx in 0..w {
                        if xx + 1 < w {
                            s += (p[y * w + xx + 1] - p[y * w + xx]).abs();
                        }
                        if y + 1 < h {
                            s += (p[(y + 1) * w + xx] - p[y * w + xx]).abs();
                        }
                    }
                }
            }
        }
        let value = Tensor::scalar(s / t.len() as f64);
        let ng = self.ng(x);
        self.push(value, Op::Smoothness(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_squares());
        let ng = self.ng(x);
        self.push(value, Op::SumSquares(x), ng)
    }

    /// Backpropagates from a scalar node with seed 1.
    pub fn backward(&self, out: Var) -> Grads {
        let mut seed = Tensor::zeros(self.shape(out));
        seed.data_mut().fill(1.0);
        self.backward_with(out, seed)
    }

    /// Backpropagates an arbitrary cotangent `seed` (same shape as `out`).
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, grads: &mut [Option<Tensor>], f: &mut dyn FnMut(&mut Tensor)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let [n, _, h, wd] = self.shape(*x);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let need_b = b.is_some_and(|b| self.ng(b));
                let mut dx = need_x.then(|| Tensor::zeros(self.shape(*x)));
                let mut dw = need_w.then(|| Tensor::zeros(self.shape(*w)));
                let mut db = b.filter(|_| need_b).map(|b| Tensor::zeros(self.shape(b)));
                kernels::conv_backward(
                    geom,
                    xv,
                    n,
                    h,
                    wd,
                    wv,
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    acc(*x, grads, &mut |s| s.add_assign(&dx));
                }
                if let Some(dw) = dw {
                    acc(*w, grads, &mut |s| s.add_assign(&dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, grads, &mut |s| s.add_assign(&db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, grads, &mut |s| s.add_assign(g));
                acc(*b, grads, &mut |s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |s| s.add_assign(g));
                acc(*b, grads, &mut |s| {
                    for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, grads, &mut |s| {
                    for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                        *o += k * v;
                    }
                });
            }
            Op::ScaleChannels(a, factors) => {
                let [n, c, h, w] = self.shape(*a);
                let hw = h * w;
                acc(*a, grads, &mut |s| {
                    for b in 0..n {
                        for (ci, k) in factors.iter().enumerate() {
                            let st = (b * c + ci) * hw;
                            for (o, v) in s.data_mut()[st..st + hw].iter_mut().zip(&g.data()[st..st + hw]) {
                                *o += k * v;
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let xv = self.value(*a).data();
                acc(*a, grads, &mut |s| {
                    for ((o, v), x) in s.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *o += if *x > 0.0 { *v } else { slope * v };
                    }
                });
            }
            Op::Concat(parts) => {
                let [n, total_c, h, w] = g.shape();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    acc(p, grads, &mut |s| {
                        for b in 0..n {
                            let src = &g.data()[(b * total_c + offset) * hw..(b * total_c + offset + pc) * hw];
                            let dst = &mut s.data_mut()[b * pc * hw..(b + 1) * pc * hw];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = g.c();
                let hw = h * w;
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        let dst = &mut s.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw];
                        for (d, v) in dst.iter_mut().zip(&g.data()[b * len * hw..(b + 1) * len * hw]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::GatherChannels(x, perm) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let oc = perm.len();
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for (j, &p) in perm.iter().enumerate() {
                            let src = &g.data()[(b * oc + j) * hw..(b * oc + j + 1) * hw];
                            let dst = &mut s.data_mut()[(b * c + p) * hw..(b * c + p + 1) * hw];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                });
            }
            Op::Unshuffle(x, sf) => {
                let [n, c, h, w] = self.shape(*x);
                let back = kernels::shuffle(g.data(), n, c, h / sf, w / sf, *sf);
                acc(*x, grads, &mut |s| {
                    for (d, v) in s.data_mut().iter_mut().zip(&back) {
                        *d += v;
                    }
                });
            }
            Op::Shuffle(x, sf) => {
                let [n, c, h, w] = self.shape(*x);
                let back = kernels::unshuffle(g.data(), n, c / (sf * sf), h * sf, w * sf, *sf);
                acc(*x, grads, &mut |s| {
                    for (d, v) in s.data_mut().iter_mut().zip(&back) {
                        *d += v;
                    }
                });
            }
            Op::ReflectPad(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (oh, ow) = (g.h(), g.w());
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                let sy = kernels::reflect_index(y, h);
                                for xx in 0..ow {
                                    let sx = kernels::reflect_index(xx, w);
                                    let i = s.index(b, ch, sy, sx);
                                    s.data_mut()[i] += g.at(b, ch, y, xx);
                                }
                            }
                        }
                    }
                });
            }
            Op::Crop(x) => {
                let [n, c, _, _] = self.shape(*x);
                let (oh, ow) = (g.h(), g.w());
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let i = s.index(b, ch, y, xx);
                                    s.data_mut()[i] += g.at(b, ch, y, xx);
                                }
                            }
                        }
                    }
                });
            }
            Op::WarpNearest(x, src) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        let idx = &src[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for (p, &sidx) in idx.iter().enumerate() {
                                s.data_mut()[base + sidx] += g.data()[base + p];
                            }
                        }
                    }
                });
            }
            Op::WarpBilinear { x, flow, taps } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                let gv = g.data()[base + p];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (idx, wt) in taps[b * hw + p].weights() {
                                    s.data_mut()[base + idx] += wt * gv;
                                }
                            }
                        }
                    }
                });
                let xv = self.value(*x);
                acc(*flow, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let plane = xv.channel_plane(b, ch);
                            let base = (b * c + ch) * hw;
                            for p in 0..hw {
                                let gv = g.data()[base + p];
                                let (gx, gy) = taps[b * hw + p].coord_grad(plane);
                                s.data_mut()[b * 2 * hw + p] += gv * gx;
                                s.data_mut()[b * 2 * hw + hw + p] += gv * gy;
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let [n, c, _, _] = self.shape(*x);
                let (oh, ow) = (g.h(), g.w());
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let v = 0.25 * g.at(b, ch, y, xx);
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let i = s.index(b, ch, 2 * y + dy, 2 * xx + dx);
                                        s.data_mut()[i] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Resize(x) => {
                let [n, c, h, w] = self.shape(*x);
                let ay = kernels::resize_axis(h, g.h());
                let ax = kernels::resize_axis(w, g.w());
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            for (oy, &(y0, y1, fy)) in ay.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in ax.iter().enumerate() {
                                    let v = g.at(b, ch, oy, ox);
                                    let d = s.data_mut();
                                    d[base + y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                                    d[base + y0 * w + x1] += v * (1.0 - fy) * fx;
                                    d[base + y1 * w + x0] += v * fy * (1.0 - fx);
                                    d[base + y1 * w + x1] += v * fy * fx;
                                }
                            }
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                acc(*x, grads, &mut |s| {
                    for ((o, v), x) in s.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *x >= *lo && *x <= *hi {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred);
                let k = 2.0 * g.item() / p.len() as f64;
                acc(*pred, grads, &mut |s| {
                    for ((o, a), b) in s.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                        *o += k * (a - b);
                    }
                });
            }
            Op::GaussianNll {
                mu,
                log_var,
                target,
                noise_var,
            } => {
                let (dmu, dlv) = crate::train::loss::gaussian_nll_grad(
                    self.value(*mu).data(),
                    self.value(*log_var).data(),
                    target.data(),
                    *noise_var,
                );
                let k = g.item();
                acc(*mu, grads, &mut |s| {
                    for (o, v) in s.data_mut().iter_mut().zip(&dmu) {
                        *o += k * v;
                    }
                });
                acc(*log_var, grads, &mut |s| {
                    for (o, v) in s.data_mut().iter_mut().zip(&dlv) {
                        *o += k * v;
                    }
                });
            }
            Op::L1(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = g.item() / av.len() as f64;
                acc(*a, grads, &mut |s| {
                    for ((o, x), y) in s.data_mut().iter_mut().zip(av).zip(bv) {
                        *o += k * sign(x - y);
                    }
                });
                acc(*b, grads, &mut |s| {
                    for ((o, x), y) in s.data_mut().iter_mut().zip(av).zip(bv) {
                        *o -= k * sign(x - y);
                    }
                });
            }
            Op::Smoothness(x) => {
                let [n, c, h, w] = self.shape(*x);
                let t = self.value(*x);
                let k = g.item() / t.len() as f64;
                acc(*x, grads, &mut |s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            let p = t.channel_plane(b, ch);
                            for y in 0..h {
                                for xx in 0..w {
                                    let i = y * w + xx;
                                    if xx + 1 < w {
                                        let d = k * sign(p[i + 1] - p[i]);
                                        s.data_mut()[base + i + 1] += d;
                                        s.data_mut()[base + i] -= d;
                                    }
                                    if y + 1 < h {
                                        let d = k * sign(p[i + w] - p[i]);
                                        s.data_mut()[base + i + w] += d;
                                        s.data_mut()[base + i] -= d;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                let k = 2.0 * g.item();
                acc(*x, grads, &mut |s| {
                    for (o, v) in s.data_mut().iter_mut().zip(xv) {
                        *o += k * v;
                    }
                });
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of a backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a node, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter registered on `graph`, summed
    /// when a parameter was loaded more than once.
    pub fn params(&self, graph: &Graph, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; num_params];
        for &(id, v) in &graph.params {
            if let Some(g) = self.get(v) {
                match &mut out[id.0] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::square_taps;

    /// Central finite-difference check of d(sum(out * probe))/d(input).
    fn check_input_grad(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor, tol: f64) {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = build(&mut g, x);
        let shape = g.shape(out);
        let probe = Tensor::from_vec(
            shape,
            (0..shape.iter().product::<usize>())
                .map(|i| libm::sin(i as f64 * 0.37 + 0.1))
                .collect(),
        )
        .unwrap();
        let grads = g.backward_with(out, probe.clone());
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let h = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input(t);
                let out = build(&mut g, x);
                g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs()),
                "element {i}: analytic {a} vs finite difference {fd}"
            );
        }
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (taps, groups) in [
            (square_taps(3, 1, false), 1),
            (square_taps(3, 1, true), 1),
            (square_taps(3, 2, false), 2),
            (vec![(0, 0)], 1),
        ] {
            let geom = Rc::new(ConvGeom {
                taps: taps.clone(),
                in_channels: 4,
                out_channels: 6,
                groups,
            });
            let wt = random_tensor([6, geom.fan_in(), 1, 1], 7);
            let bias = random_tensor([1, 6, 1, 1], 8);
            let geom2 = geom.clone();
            check_input_grad(
                move |g, x| {
                    let w = g.constant(wt.clone());
                    let b = g.constant(bias.clone());
                    g.conv(x, w, Some(b), geom2.clone()).unwrap()
                },
                random_tensor([2, 4, 5, 6], 3),
                1e-6,
            );
            // weight gradient
            let x = random_tensor([2, 4, 5, 6], 4);
            let geom3 = geom.clone();
            check_input_grad(
                move |g, w| {
                    let xv = g.constant(x.clone());
                    g.conv(xv, w, None, geom3.clone()).unwrap()
                },
                random_tensor([6, geom.fan_in(), 1, 1], 9),
                1e-6,
            );
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let x = random_tensor([2, 4, 6, 4], 11);
        check_input_grad(|g, x| g.unshuffle(x, 2).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.shuffle(x, 2).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.reflect_pad(x, 9, 7).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.crop(x, 3, 3).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.gather_channels(x, vec![3, 1, 1, 0]).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.slice_channels(x, 1, 2).unwrap(), x.clone(), 1e-6);
        check_input_grad(|g, x| g.avg_pool2(x), x.clone(), 1e-6);
        check_input_grad(|g, x| g.resize(x, 11, 9), x.clone(), 1e-6);
        check_input_grad(|g, x| g.leaky_relu(x, 0.1), x.clone(), 1e-6);
        check_input_grad(|g, x| g.smoothness(x), x.clone(), 1e-6);
        check_input_grad(|g, x| g.sum_squares(x), x.clone(), 1e-6);
        check_input_grad(
            |g, x| {
                let y = g.scale(x, 0.5);
                let z = g.concat(&[x, y]).unwrap();
                g.scale_channels(z, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap()
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn bilinear_warp_gradients_in_input_and_flow() {
        let img = random_tensor([1, 2, 7, 8], 21);
        let flow = random_tensor([1, 2, 7, 8], 22).map(|v| 1.7 * v + 0.13);
        let f2 = flow.clone();
        check_input_grad(
            move |g, x| {
                let f = g.constant(f2.clone());
                g.warp_bilinear(x, f).unwrap()
            },
            img.clone(),
            1e-6,
        );
        check_input_grad(
            move |g, f| {
                let x = g.constant(img.clone());
                g.warp_bilinear(x, f).unwrap()
            },
            flow,
            1e-5,
        );
    }

    #[test]
    fn nearest_warp_gradient_scatters() {
        let flow = random_tensor([1, 2, 6, 6], 5).map(|v| 2.3 * v + 0.21);
        check_input_grad(move |g, x| g.warp_nearest(x, &flow).unwrap(), random_tensor([1, 3, 6, 6], 6), 1e-6);
    }

    #[test]
    fn loss_gradients() {
        let target = random_tensor([1, 2, 3, 3], 31);
        let t2 = target.clone();
        check_input_grad(move |g, x| g.mse(x, &t2).unwrap(), random_tensor([1, 2, 3, 3], 32), 1e-6);
        check_input_grad(
            move |g, x| {
                let c = g.constant(target.clone());
                g.l1(x, c).unwrap()
            },
            random_tensor([1, 2, 3, 3], 33),
            1e-6,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(3.0));
        let c = g.add(a, b).unwrap();
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 1.0);
    }
}
