//! Tiny trainable coarse-to-fine flow CNN.

use alloc::vec;
use alloc::vec::Vec;

use super::{check_pair, FlowEstimator, FlowEstimatorConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{square_taps, ConvGeom};
use crate::nn::{Conv2d, Init, ParamStore, Params};
use crate::tensor::Tensor;
use crate::warp::FlowField;

const SLOPE: f64 = 0.1;
/// Coarsest level is never smaller than this.
const MIN_LEVEL_SIDE: usize = 4;

#[derive(Clone, Debug)]
struct Level {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

/// Per level, coarsest first:
///
/// ```text
/// flow_up  = 2x bilinear upsample of the coarser flow (zero at the top)
/// b_warp   = bilinear backward warp of b by flow_up
/// delta    = conv3x3(5 -> H) -> lrelu -> conv3x3(H -> H) -> lrelu -> conv3x3(H -> 2)
///            applied to [a, b_warp, a - b_warp, flow_up]
/// flow     = flow_up + delta
/// ```
///
/// Frames are reduced to grayscale and pyramids are built by 2x2 averaging.
/// The last conv of every level starts at zero, so an untrained network
/// predicts zero flow.
#[derive(Clone, Debug)]
pub struct TinyPyramid {
    pub params: ParamStore,
    levels: Vec<Level>,
    frozen: bool,
}

impl TinyPyramid {
    pub fn new(config: &FlowEstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let hdim = config.hidden;
        let geom = |cin, cout| ConvGeom {
            taps: square_taps(3, 1, false),
            in_channels: cin,
            out_channels: cout,
            groups: 1,
        };
        let levels = (0..config.pyramid_levels)
            .map(|l| {
                Ok(Level {
                    c1: Conv2d::new(&mut params, &mut init, &alloc::format!("flow.l{l}.c1"), geom(5, hdim), true, 1.0)?,
                    c2: Conv2d::new(&mut params, &mut init, &alloc::format!("flow.l{l}.c2"), geom(hdim, hdim), true, 1.0)?,
                    c3: Conv2d::new(&mut params, &mut init, &alloc::format!("flow.l{l}.c3"), geom(hdim, 2), true, 0.0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            levels,
            frozen: false,
        })
    }

    /// A copy whose parameters are marked fixed.
    pub fn frozen_snapshot(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Graph-level estimate on `[1, C, H, W]` frame nodes; returns `[1, 2, H, W]` (dx, dy).
    pub fn forward_graph(&self, g: &mut Graph, p: Params<'_>, frame_a: Var, frame_b: Var) -> Result<Var> {
        if g.shape(frame_a) != g.shape(frame_b) {
            return Err(Error::Shape(alloc::format!(
                "flow frames {:?} vs {:?}",
                g.shape(frame_a),
                g.shape(frame_b)
            )));
        }
        let a = gray(g, frame_a)?;
        let b = gray(g, frame_b)?;
        let mut pa = vec![a];
        let mut pb = vec![b];
        for _ in 1..self.levels.len() {
            let [_, _, h, w] = g.shape(*pa.last().unwrap());
            if h / 2 < MIN_LEVEL_SIDE || w / 2 < MIN_LEVEL_SIDE {
                break;
            }
            let na = g.avg_pool2(*pa.last().unwrap());
            let nb = g.avg_pool2(*pb.last().unwrap());
            pa.push(na);
            pb.push(nb);
        }
        let mut flow: Option<Var> = None;
        for (l, (&a, &b)) in pa.iter().zip(&pb).enumerate().rev() {
            let [_, _, h, w] = g.shape(a);
            let up = match flow {
                None => g.constant(Tensor::zeros([1, 2, h, w])),
                Some(f) => {
                    let [_, _, fh, fw] = g.shape(f);
                    let r = g.resize(f, h, w);
                    g.scale_channels(r, vec![w as f64 / fw as f64, h as f64 / fh as f64])?
                }
            };
            let bw = g.warp_bilinear(b, up)?;
            let diff = g.sub(a, bw)?;
            let x = g.concat(&[a, bw, diff, up])?;
            let lv = &self.levels[l];
            let z = lv.c1.forward(g, p, x)?;
            let z = g.leaky_relu(z, SLOPE);
            let z = lv.c2.forward(g, p, z)?;
            let z = g.leaky_relu(z, SLOPE);
            let delta = lv.c3.forward(g, p, z)?;
            flow = Some(g.add(up, delta)?);
        }
        let flow = flow.expect("at least one level");
        let [_, _, h, w] = g.shape(flow);
        let bound = h.max(w) as f64;
        Ok(g.clamp(flow, -bound, bound))
    }
}

fn gray(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    if c == 1 {
        return Ok(x);
    }
    let mut acc = g.slice_channels(x, 0, 1)?;
    for ch in 1..c {
        let s = g.slice_channels(x, ch, 1)?;
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, 1.0 / c as f64))
}

/// Photometric warm-up objective: `L1(a, warp(b, flow)) + w * smoothness(flow)`, on grayscale.
pub fn photometric_loss(g: &mut Graph, frame_a: Var, frame_b: Var, flow: Var, smoothness_weight: f64) -> Result<Var> {
    let a = gray(g, frame_a)?;
    let b = gray(g, frame_b)?;
    let bw = g.warp_bilinear(b, flow)?;
    let data = g.l1(a, bw)?;
    let smooth = g.smoothness(flow);
    let smooth = g.scale(smooth, smoothness_weight);
    g.add(data, smooth)
}

impl FlowEstimator for TinyPyramid {
    fn estimate(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<FlowField> {
        check_pair(frame_a, frame_b)?;
        let mut g = Graph::new();
        let a = g.constant(frame_a.clone());
        let b = g.constant(frame_b.clone());
        let f = self.forward_graph(&mut g, Params::frozen(&self.params), a, b)?;
        if !g.value(f).is_finite() {
            return Err(Error::NonFinite("tiny_pyramid flow".into()));
        }
        FlowField::from_tensor(g.value(f), 0)
    }

    fn is_trainable(&self) -> bool {
        true
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}
