//! Optical flow between neighbouring frames, and its self-distillation.
//!
//! Every estimator returns *backward* flow: `estimate(a, b)` maps pixel `p`
//! of frame `a` to `p + flow(p)` in frame `b`, so `warp(b, flow) ~ a`.

mod distill;
mod lk;
mod pyramid;

pub use distill::{
    distillation_loss, distillation_loss_graph, make_teacher_flows, weight_sum_squares, DistillationConfig, TeacherFlows,
    TeacherSource,
};
pub use lk::ClassicalLk;
pub use pyramid::{photometric_loss, TinyPyramid};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{FlowDirection, FlowField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowBackend {
    #[default]
    TinyPyramid,
    ClassicalLk,
    ExternalAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowEstimatorConfig {
    pub backend: FlowBackend,
    pub pyramid_levels: usize,
    /// Refinement iterations per level (classical backend only).
    pub iterations: usize,
    /// Hidden width of the tiny pyramid's per-level CNN.
    pub hidden: usize,
    /// Half-size of the Lucas-Kanade window.
    pub window_radius: usize,
}

impl Default for FlowEstimatorConfig {
    fn default() -> Self {
        Self {
            backend: FlowBackend::TinyPyramid,
            pyramid_levels: 3,
            iterations: 3,
            hidden: 16,
            window_radius: 4,
        }
    }
}

impl FlowEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be >= 1".into()));
        }
        if self.backend == FlowBackend::ClassicalLk && self.iterations == 0 {
            return Err(Error::Config("classical_lk needs at least one iteration".into()));
        }
        if self.backend == FlowBackend::TinyPyramid && self.hidden == 0 {
            return Err(Error::Config("tiny_pyramid hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Dense flow estimator between two `[1, C, H, W]` frames.
pub trait FlowEstimator {
    fn estimate(&self, frame_a: &Tensor, frame_b: &Tensor) -> Result<FlowField>;

    /// Whether the estimator has parameters that distillation could train.
    fn is_trainable(&self) -> bool {
        false
    }

    /// Whether the parameters are fixed (a frozen snapshot, or no parameters at all).
    fn is_frozen(&self) -> bool {
        true
    }
}

/// Channel mean of a `[1, C, H, W]` frame as `[1, 1, H, W]`.
pub fn grayscale(frame: &Tensor) -> Tensor {
    let [n, c, h, w] = frame.shape();
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for (o, v) in out.data_mut()[b * h * w..(b + 1) * h * w]
                .iter_mut()
                .zip(frame.channel_plane(b, ch))
            {
                *o += v / c as f64;
            }
        }
    }
    out
}

pub(crate) fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(alloc::format!("flow frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.n() != 1 {
        return Err(Error::Shape("flow estimation takes single frames".into()));
    }
    Ok(())
}

/// Flows for both propagation directions of a clip.
///
/// `forward[k]` aligns frame `k` to frame `k + 1` (`estimate(y_{k+1}, y_k)`);
/// `backward[k]` aligns frame `k + 1` to frame `k` (`estimate(y_k, y_{k+1})`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClipFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl ClipFlows {
    pub fn estimate<E: FlowEstimator + ?Sized>(estimator: &E, frames: &[Tensor]) -> Result<Self> {
        let mut out = Self::default();
        for k in 0..frames.len().saturating_sub(1) {
            let fwd = estimator.estimate(&frames[k + 1], &frames[k])?;
            out.forward.push(fwd.with_frames(FlowDirection::Forward, k, k + 1));
            let bwd = estimator.estimate(&frames[k], &frames[k + 1])?;
            out.backward.push(bwd.with_frames(FlowDirection::Backward, k + 1, k));
        }
        Ok(out)
    }

    /// Flows for aligning states without ever looking at the target frame.
    ///
    /// Step `t` of the forward recurrence reuses the flow between frames
    /// `t - 1` and `t - 2` (constant motion), the backward recurrence the flow
    /// between `t + 1` and `t + 2`. The first step in each direction gets zero
    /// flow. No alignment then depends on `y_t`, so the noise at a pixel cannot
    /// steer which state values are sampled for it.
    pub fn lagged(&self) -> Self {
        let n = self.forward.len();
        let zero_like = |f: &FlowField| FlowField::zeros(f.height(), f.width());
        let mut out = Self::default();
        for k in 0..n {
            let fwd = if k == 0 { zero_like(&self.forward[0]) } else { self.forward[k - 1].clone() };
            out.forward.push(fwd.with_frames(FlowDirection::Forward, k, k + 1));
            let bwd = if k + 1 == n { zero_like(&self.backward[k]) } else { self.backward[k + 1].clone() };
            out.backward.push(bwd.with_frames(FlowDirection::Backward, k + 1, k));
        }
        out
    }

    /// Zero flow everywhere (static-scene assumption).
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        let n = frames.saturating_sub(1);
        Self {
            forward: (0..n)
                .map(|k| FlowField::zeros(height, width).with_frames(FlowDirection::Forward, k, k + 1))
                .collect(),
            backward: (0..n)
                .map(|k| FlowField::zeros(height, width).with_frames(FlowDirection::Backward, k + 1, k))
                .collect(),
        }
    }
}

/// Zero flow for any pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFlow;

impl FlowEstimator for ZeroFlow {
    fn estimate(&self, a: &Tensor, b: &Tensor) -> Result<FlowField> {
        check_pair(a, b)?;
        Ok(FlowField::zeros(a.h(), a.w()))
    }
}
