//! Bidirectional recurrent propagation of blind-spot hidden states.
//!
//! Forward pass: `h_0 = cell(y_0, 0)`, `h_t = cell(y_t, warp(h_{t-1}, O_t))`,
//! where the cell is a BSA block or the plain blind-spot cell. The backward
//! pass is the same recurrence run from the last frame with its own parameters. States are aligned with nearest-neighbour warping only.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::blindspot::RecurrentCell;
use crate::error::{Error, Result};
use crate::flow::ClipFlows;
use crate::graph::{Graph, Var};
use crate::nn::{ParamStore, Params};
use crate::tensor::Tensor;
use crate::videodata::VideoSequence;
use crate::warp::{FlowDirection, FlowField, Interpolation};

/// Which flows align the recurrent states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowAlignment {
    /// Flow between the previous pair of frames, extrapolated one step.
    /// Independent of the frame being predicted.
    #[default]
    Lagged,
    /// Flow between the state's frame and the target frame. More accurate
    /// under changing motion, but the flow sees the target's noise and a
    /// trained cell can decode part of it from the sampling pattern.
    Adjacent,
}

impl FlowAlignment {
    pub fn select(self, flows: &ClipFlows) -> Cow<'_, ClipFlows> {
        match self {
            Self::Lagged => Cow::Owned(flows.lagged()),
            Self::Adjacent => Cow::Borrowed(flows),
        }
    }
}

/// The only interpolation allowed on tensors that carry noise or features.
pub const STATE_INTERPOLATION: Interpolation = Interpolation::Nearest;

/// Hidden state `h_t` of one propagation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotState {
    /// `[1, F, H, W]`.
    pub features: Tensor,
    pub direction: FlowDirection,
    pub frame_index: usize,
}

/// Warps a recurrent state onto the next frame.
///
/// # Panics
/// If `interpolation` is anything but nearest; mixing neighbouring noisy
/// values would correlate the state with the noise it is meant to predict.
pub fn align_state(g: &mut Graph, h: Var, flow: &FlowField, interpolation: Interpolation) -> Result<Var> {
    assert_eq!(
        interpolation,
        Interpolation::Nearest,
        "blind-spot states must only be aligned with nearest-neighbour warping"
    );
    g.warp_nearest(h, &flow.to_tensor())
}

fn check_flows(frames: usize, flows: &[FlowField], shape: [usize; 4]) -> Result<()> {
    if flows.len() + 1 != frames {
        return Err(Error::Input(alloc::format!(
            "{frames} frames need {} flows, got {}",
            frames.saturating_sub(1),
            flows.len()
        )));
    }
    if let Some(f) = flows.iter().find(|f| f.height() != shape[2] || f.width() != shape[3]) {
        return Err(Error::Shape(alloc::format!(
            "flow {}x{} for frames {}x{}",
            f.height(),
            f.width(),
            shape[2],
            shape[3]
        )));
    }
    Ok(())
}

/// Graph-level forward recurrence. `flows[t - 1]` samples frame `t - 1`'s
/// state at `p + flow(p)` to align it with frame `t`.
pub fn forward_graph<C: RecurrentCell + ?Sized>(g: &mut Graph, p: Params<'_>, block: &C, frames: &[Var], flows: &[FlowField]) -> Result<Vec<Var>> {
    let first = *frames.first().ok_or_else(|| Error::Input("empty clip".into()))?;
    let [_, _, h, w] = g.shape(first);
    check_flows(frames.len(), flows, g.shape(first))?;
    let zero = g.constant(Tensor::zeros([1, block.hidden_channels(), h, w]));
    let mut states = Vec::with_capacity(frames.len());
    let mut prev = block.step(g, p, first, zero)?;
    states.push(prev);
    for (t, &y) in frames.iter().enumerate().skip(1) {
        let aligned = align_state(g, prev, &flows[t - 1], STATE_INTERPOLATION)?;
        prev = block.step(g, p, y, aligned)?;
        states.push(prev);
    }
    Ok(states)
}

/// Graph-level backward recurrence. `flows[t]` samples frame `t + 1`'s state
/// to align it with frame `t`. Returned states are in frame order.
pub fn backward_graph<C: RecurrentCell + ?Sized>(g: &mut Graph, p: Params<'_>, block: &C, frames: &[Var], flows: &[FlowField]) -> Result<Vec<Var>> {
    let reversed: Vec<Var> = frames.iter().rev().copied().collect();
    let reversed_flows: Vec<FlowField> = flows.iter().rev().cloned().collect();
    let mut states = forward_graph(g, p, block, &reversed, &reversed_flows)?;
    states.reverse();
    Ok(states)
}

fn collect(g: &Graph, vars: &[Var], direction: FlowDirection) -> Vec<BlindSpotState> {
    vars.iter()
        .enumerate()
        .map(|(t, &v)| BlindSpotState {
            features: g.value(v).clone(),
            direction,
            frame_index: t,
        })
        .collect()
}

fn frame_constants(g: &mut Graph, seq: &VideoSequence) -> Vec<Var> {
    seq.frame_tensors().into_iter().map(|f| g.constant(f)).collect()
}

/// Runs the forward recurrence on a clip (inference; no gradients).
pub fn propagate_forward<C: RecurrentCell + ?Sized>(
    block: &C,
    store: &ParamStore,
    seq: &VideoSequence,
    flows_fwd: &[FlowField],
) -> Result<Vec<BlindSpotState>> {
    let mut g = Graph::new();
    let frames = frame_constants(&mut g, seq);
    let states = forward_graph(&mut g, Params::frozen(store), block, &frames, flows_fwd)?;
    Ok(collect(&g, &states, FlowDirection::Forward))
}

/// Runs the backward recurrence on a clip (inference; no gradients).
pub fn propagate_backward<C: RecurrentCell + ?Sized>(
    block: &C,
    store: &ParamStore,
    seq: &VideoSequence,
    flows_bwd: &[FlowField],
) -> Result<Vec<BlindSpotState>> {
    let mut g = Graph::new();
    let frames = frame_constants(&mut g, seq);
    let states = backward_graph(&mut g, Params::frozen(store), block, &frames, flows_bwd)?;
    Ok(collect(&g, &states, FlowDirection::Backward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindspot::{probe_dependency, BlindSpotLayerConfig, BsaBlock, PixelPredictor, ProbeLocation};
    use crate::nn::Init;
    use crate::videodata::TranslatingTexture;
    use alloc::vec;

    fn block(recurrent_gain: f64, seed: u64) -> (BsaBlock, ParamStore) {
        let cfg = BlindSpotLayerConfig {
            channels: 6,
            num_dconv_blocks: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let b = BsaBlock::new(&mut store, &mut Init::new(seed), "f", 1, &cfg, recurrent_gain).unwrap();
        (b, store)
    }

    fn clip(t: usize, seed: u64) -> VideoSequence {
        TranslatingTexture::new(16, 16, 1, (1.0, 0.0), 3, seed).render(t).unwrap()
    }

    fn zero_flows(n: usize) -> Vec<FlowField> {
        vec![FlowField::zeros(16, 16); n]
    }

    #[test]
    fn single_frame_uses_zero_state() {
        let (b, store) = block(1.0, 0);
        let seq = clip(1, 1);
        let states = propagate_forward(&b, &store, &seq, &[]).unwrap();
        assert_eq!(states.len(), 1);
        let mut g = Graph::new();
        let y = g.constant(seq.frame_tensor(0));
        let z = g.constant(Tensor::zeros([1, 6, 16, 16]));
        let direct = b.forward(&mut g, Params::frozen(&store), y, z).unwrap();
        assert_eq!(&states[0].features, g.value(direct));
        let back = propagate_backward(&b, &store, &seq, &[]).unwrap();
        assert_eq!(back[0].features, states[0].features);
        assert_eq!(back[0].direction, FlowDirection::Backward);
    }

    #[test]
    fn flow_count_is_checked() {
        let (b, store) = block(1.0, 0);
        let seq = clip(3, 1);
        assert!(propagate_forward(&b, &store, &seq, &zero_flows(1)).is_err());
        assert!(propagate_backward(&b, &store, &seq, &zero_flows(3)).is_err());
        assert!(propagate_forward(&b, &store, &seq, &[FlowField::zeros(8, 8), FlowField::zeros(8, 8)]).is_err());
    }

    #[test]
    fn static_scene_reaches_fixed_point() {
        let (b, store) = block(crate::model::DEFAULT_RECURRENT_GAIN, 3);
        let one = clip(1, 2);
        let data: Vec<f32> = (0..8).flat_map(|_| one.data().iter().copied()).collect();
        let seq = VideoSequence::new(8, 16, 16, 1, data).unwrap();
        let states = propagate_forward(&b, &store, &seq, &zero_flows(7)).unwrap();
        for t in 3..7 {
            let diff = states[t]
                .features
                .data()
                .iter()
                .zip(states[t + 1].features.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5, "t={t}: {diff}");
        }
    }

    #[test]
    fn backward_is_time_reversed_forward() {
        let (b, store) = block(1.0, 5);
        let seq = clip(3, 4);
        let flows = vec![FlowField::uniform(16, 16, 1.0, 0.0), FlowField::uniform(16, 16, -2.0, 1.0)];
        let back = propagate_backward(&b, &store, &seq, &flows).unwrap();
        let rev_frames: Vec<Tensor> = seq.frame_tensors().into_iter().rev().collect();
        let rev = VideoSequence::from_frame_tensors(&rev_frames).unwrap();
        let rev_flows: Vec<FlowField> = flows.iter().rev().cloned().collect();
        let fwd = propagate_forward(&b, &store, &rev, &rev_flows).unwrap();
        for t in 0..3 {
            assert_eq!(back[t].features, fwd[2 - t].features);
        }
    }

    /// Outputs the forward (or backward) state of every frame.
    struct States<'a> {
        block: &'a BsaBlock,
        store: &'a ParamStore,
        flows: Vec<FlowField>,
        backward: bool,
    }

    impl PixelPredictor for States<'_> {
        fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
            let p = Params::frozen(self.store);
            if self.backward {
                backward_graph(g, p, self.block, frames, &self.flows)
            } else {
                forward_graph(g, p, self.block, frames, &self.flows)
            }
        }
    }

    #[test]
    fn states_are_blind_and_see_other_frames() {
        let (b, store) = block(1.0, 8);
        let seq = clip(4, 6);
        let flows = vec![FlowField::uniform(16, 16, 1.0, 0.0); 3];
        for backward in [false, true] {
            let m = States {
                block: &b,
                store: &store,
                flows: flows.clone(),
                backward,
            };
            let t = if backward { 0 } else { 3 };
            let maps = probe_dependency(&m, &seq, ProbeLocation::new(t, 8, 8)).unwrap();
            assert_eq!(maps[t].at(8, 8), 0.0);
            let far = if backward { 3 } else { 0 };
            assert!(maps[far].total() > 0.0, "no long-range dependency (backward={backward})");
        }
    }

    #[test]
    #[should_panic(expected = "nearest")]
    fn bilinear_alignment_is_rejected() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros([1, 1, 8, 8]));
        let _ = align_state(&mut g, h, &FlowField::zeros(8, 8), Interpolation::Bilinear);
    }
}
