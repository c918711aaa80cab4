//! The assembled denoiser: two recurrent blind-spot branches, SRFE fusion
//! and a flow estimator for state alignment.

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blindspot::{certify, require_blind, BlindSpotLayerConfig, BsaBlock, PixelPredictor, PlainBlindSpot, ProbeLocation};
use crate::error::{Error, Result};
use crate::flow::{ClassicalLk, ClipFlows, FlowBackend, FlowEstimator, FlowEstimatorConfig, TinyPyramid};
use crate::graph::{Graph, Var};
use crate::nn::{Init, ParamStore, Params};
use crate::propagation::{self, FlowAlignment};
use crate::srfe::{Head, SRFEConfig, Srfe};
use crate::tensor::Tensor;
use crate::train::loss::{posterior_mean, GaussianPrediction, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::videodata::{NoiseKind, NoiseModel, VideoSequence};

/// Initial scale of the weights that read the recurrent state. Small enough
/// that an untrained recurrence contracts (about 3% per step).
pub const DEFAULT_RECURRENT_GAIN: f64 = 0.03;

/// Which parts of the architecture are active.
///
/// Both directions always propagate flow-aligned states. With `bsa` off the
/// recurrent cell is a single masked conv over the frame and the warped
/// state. With `srfe` off the fusion is a 1x1 head.
/// `flow_refine` only affects training: it switches on distillation of the
/// flow estimator after warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentToggles {
    pub bsa: bool,
    pub srfe: bool,
    pub flow_refine: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl ComponentToggles {
    pub const BASELINE: Self = Self {
        bsa: false,
        srfe: false,
        flow_refine: false,
    };
    pub const PLUS_BSA: Self = Self {
        bsa: true,
        srfe: false,
        flow_refine: false,
    };
    pub const PLUS_SRFE: Self = Self {
        bsa: true,
        srfe: true,
        flow_refine: false,
    };
    pub const FULL: Self = Self {
        bsa: true,
        srfe: true,
        flow_refine: true,
    };

    /// The four cumulative ablation rows, in order.
    pub fn ablation_rows() -> [(&'static str, Self); 4] {
        [
            ("baseline", Self::BASELINE),
            ("+bsa", Self::PLUS_BSA),
            ("+srfe", Self::PLUS_SRFE),
            ("+flow_refine", Self::FULL),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StbnConfig {
    pub image_channels: usize,
    pub blindspot: BlindSpotLayerConfig,
    pub srfe: SRFEConfig,
    pub flow: FlowEstimatorConfig,
    pub components: ComponentToggles,
    pub recurrent_init_gain: f64,
    pub alignment: FlowAlignment,
}

impl Default for StbnConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            blindspot: BlindSpotLayerConfig::default(),
            srfe: SRFEConfig::default(),
            flow: FlowEstimatorConfig::default(),
            components: ComponentToggles::FULL,
            recurrent_init_gain: DEFAULT_RECURRENT_GAIN,
            alignment: FlowAlignment::Lagged,
        }
    }
}

impl StbnConfig {
    /// Narrow network for CPU-scale experiments.
    pub fn desk() -> Self {
        let width = 16;
        Self {
            blindspot: BlindSpotLayerConfig {
                channels: width,
                num_dconv_blocks: 2,
                ..Default::default()
            },
            srfe: SRFEConfig {
                channels: width,
                num_residual_blocks: 2,
                ..Default::default()
            },
            flow: FlowEstimatorConfig {
                hidden: 8,
                ..Default::default()
            },
            ..Self::default()
        }
    }

    pub fn with_channels(mut self, image_channels: usize) -> Self {
        self.image_channels = image_channels;
        self
    }

    pub fn with_components(mut self, components: ComponentToggles) -> Self {
        self.components = components;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config(alloc::format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        self.blindspot.validate()?;
        self.srfe.validate()?;
        self.flow.validate()?;
        if self.blindspot.channels != self.srfe.channels {
            return Err(Error::Config(alloc::format!(
                "blind-spot width {} and SRFE width {} must match",
                self.blindspot.channels,
                self.srfe.channels
            )));
        }
        if !(self.recurrent_init_gain.is_finite() && self.recurrent_init_gain >= 0.0) {
            return Err(Error::Config("recurrent_init_gain must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The flow estimator owned by a model.
#[derive(Clone)]
pub enum FlowModule {
    Tiny(TinyPyramid),
    Classical(ClassicalLk),
    /// Supplied at runtime; `None` until [`StbnModel::set_external_flow`] is called.
    External(Option<Rc<dyn FlowEstimator>>),
}

impl fmt::Debug for FlowModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowModule::Tiny(t) => write!(f, "Tiny({} levels)", t.num_levels()),
            FlowModule::Classical(c) => write!(f, "Classical({c:?})"),
            FlowModule::External(e) => write!(f, "External(attached: {})", e.is_some()),
        }
    }
}

impl FlowModule {
    pub fn estimator(&self) -> Result<&dyn FlowEstimator> {
        match self {
            FlowModule::Tiny(t) => Ok(t),
            FlowModule::Classical(c) => Ok(c),
            FlowModule::External(Some(e)) => Ok(e.as_ref()),
            FlowModule::External(None) => Err(Error::Flow("external flow adapter not attached".into())),
        }
    }
}

#[derive(Clone, Debug)]
enum Branch {
    Bsa(BsaBlock),
    Plain(PlainBlindSpot),
}

/// Spatiotemporal blind-spot network.
#[derive(Clone, Debug)]
pub struct StbnModel {
    pub config: StbnConfig,
    /// Denoiser parameters (the flow estimator keeps its own).
    pub params: ParamStore,
    pub flow: FlowModule,
    forward: Branch,
    backward: Branch,
    srfe: Srfe,
}

/// Side and frame count of the random clip used by the construction-time self-check.
const SELF_CHECK_SIDE: usize = 16;
const SELF_CHECK_FRAMES: usize = 3;

impl StbnModel {
    /// Builds the model and certifies its blind spot with gradient probes on
    /// a random clip. Configurations that leak the co-located pixel are rejected.
    pub fn new(config: StbnConfig, seed: u64) -> Result<Self> {
        let model = Self::new_unchecked(config, seed)?;
        model.self_check()?;
        Ok(model)
    }

    /// Builds the model without the blind-spot self-check.
    pub fn new_unchecked(config: StbnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let c = config.image_channels;
        let branch = |name: &str, params: &mut ParamStore, init: &mut Init| -> Result<Branch> {
            Ok(if config.components.bsa {
                Branch::Bsa(BsaBlock::new(params, init, name, c, &config.blindspot, config.recurrent_init_gain)?)
            } else {
                Branch::Plain(PlainBlindSpot::new(params, init, name, c, &config.blindspot, config.recurrent_init_gain)?)
            })
        };
        let forward = branch("bsa_f", &mut params, &mut init)?;
        let backward = branch("bsa_b", &mut params, &mut init)?;
        let srfe = Srfe::new(
            &mut params,
            &mut init,
            "srfe",
            &config.srfe,
            c,
            config.blindspot.activation,
            config.components.srfe,
        )?;
        let flow = match config.flow.backend {
            FlowBackend::TinyPyramid => FlowModule::Tiny(TinyPyramid::new(&config.flow, seed ^ 0x9e37_79b9_7f4a_7c15)?),
            FlowBackend::ClassicalLk => FlowModule::Classical(ClassicalLk::from_config(&config.flow)),
            FlowBackend::ExternalAdapter => FlowModule::External(None),
        };
        Ok(Self {
            config,
            params,
            flow,
            forward,
            backward,
            srfe,
        })
    }

    pub fn set_external_flow(&mut self, estimator: Rc<dyn FlowEstimator>) {
        self.flow = FlowModule::External(Some(estimator));
    }

    pub fn image_channels(&self) -> usize {
        self.config.image_channels
    }

    pub fn out_channels(&self) -> usize {
        self.srfe.out_channels()
    }

    pub fn head(&self) -> Head {
        self.config.srfe.head
    }

    /// The trainable flow network, if the backend has one.
    pub fn flow_net(&self) -> Option<&TinyPyramid> {
        match &self.flow {
            FlowModule::Tiny(t) => Some(t),
            _ => None,
        }
    }

    pub fn flow_net_mut(&mut self) -> Option<&mut TinyPyramid> {
        match &mut self.flow {
            FlowModule::Tiny(t) => Some(t),
            _ => None,
        }
    }

    /// Gradient probes at interior pixels of every frame of a random clip.
    ///
    /// Flow values cannot open the blind spot (warped states only carry
    /// other frames), so a detached external estimator is checked with zero flows.
    pub fn self_check(&self) -> Result<()> {
        let (t, s, c) = (SELF_CHECK_FRAMES, SELF_CHECK_SIDE, self.config.image_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_c4ec);
        let data = (0..t * s * s * c).map(|_| (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32).collect();
        let clip = VideoSequence::new(t, s, s, c, data)?;
        let probes: Vec<ProbeLocation> = (0..t)
            .flat_map(|k| [ProbeLocation::new(k, s / 2, s / 2), ProbeLocation::new(k, s / 2 - 3, s / 2 + 2)])
            .collect();
        let verdicts = match self.flow {
            FlowModule::External(None) => certify(&ZeroFlowView(self), &clip, &probes)?,
            _ => certify(self, &clip, &probes)?,
        };
        require_blind(&verdicts).map_err(|e| match e {
            Error::BlindSpotViolation(d) => Error::BlindSpotViolation(alloc::format!(
                "{d}; rejected configuration: {}",
                crate::blindspot::describe(&self.config.blindspot)
            )),
            other => other,
        })
    }

    /// Flows between neighbouring frames of both directions.
    pub fn estimate_flows(&self, frames: &[Tensor]) -> Result<ClipFlows> {
        if frames.is_empty() {
            return Err(Error::Input("empty clip".into()));
        }
        ClipFlows::estimate(self.flow.estimator()?, frames)
    }

    /// Raw network outputs, one `[1, C_out, H, W]` node per frame.
    pub fn forward_graph(&self, g: &mut Graph, p: Params<'_>, frames: &[Var], flows: &ClipFlows) -> Result<Vec<Var>> {
        let first = *frames.first().ok_or_else(|| Error::Input("empty clip".into()))?;
        if g.shape(first)[1] != self.config.image_channels {
            return Err(Error::Shape(alloc::format!(
                "model expects {} channels, clip has {}",
                self.config.image_channels,
                g.shape(first)[1]
            )));
        }
        let flows = self.config.alignment.select(flows);
        let states = |g: &mut Graph, branch: &Branch, forward: bool| -> Result<Vec<Var>> {
            match branch {
                Branch::Bsa(b) if forward => propagation::forward_graph(g, p, b, frames, &flows.forward),
                Branch::Bsa(b) => propagation::backward_graph(g, p, b, frames, &flows.backward),
                Branch::Plain(b) if forward => propagation::forward_graph(g, p, b, frames, &flows.forward),
                Branch::Plain(b) => propagation::backward_graph(g, p, b, frames, &flows.backward),
            }
        };
        let hf = states(g, &self.forward, true)?;
        let hb = states(g, &self.backward, false)?;
        hf.iter().zip(&hb).map(|(&f, &b)| self.srfe.forward(g, p, f, b)).collect()
    }

    /// Splits a Gaussian-head output node into `(mu, clamped log_var)`.
    pub fn split_gaussian(&self, g: &mut Graph, out: Var) -> Result<(Var, Var)> {
        let c = self.config.image_channels;
        if self.head() != Head::GaussianParams {
            return Err(Error::Config("regression head has no variance output".into()));
        }
        let mu = g.slice_channels(out, 0, c)?;
        let lv = g.slice_channels(out, c, c)?;
        Ok((mu, g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
    }

    /// Per-frame raw outputs on a clip, with flows estimated from the clip itself.
    pub fn predict(&self, seq: &VideoSequence) -> Result<Vec<Tensor>> {
        self.check_clip(seq)?;
        let flows = self.estimate_flows(&seq.frame_tensors())?;
        self.predict_with_flows(seq, &flows)
    }

    /// [`predict`](Self::predict) with precomputed flows.
    pub fn predict_with_flows(&self, seq: &VideoSequence, flows: &ClipFlows) -> Result<Vec<Tensor>> {
        self.check_clip(seq)?;
        let frames = seq.frame_tensors();
        let mut g = Graph::new();
        let vars: Vec<Var> = frames.into_iter().map(|f| g.constant(f)).collect();
        let outs = self.forward_graph(&mut g, Params::frozen(&self.params), &vars, flows)?;
        let outs: Vec<Tensor> = outs.iter().map(|&o| g.value(o).clone()).collect();
        if outs.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(outs)
    }

    /// Blind-spot point prediction (`mu` for the Gaussian head), ignoring the
    /// co-located noisy pixel entirely.
    pub fn blind_prediction(&self, seq: &VideoSequence) -> Result<Vec<Tensor>> {
        let outs = self.predict(seq)?;
        self.point_estimates(&outs)
    }

    fn point_estimates(&self, outs: &[Tensor]) -> Result<Vec<Tensor>> {
        let c = self.config.image_channels;
        outs.iter()
            .map(|o| match self.head() {
                Head::Regression => Ok(o.clone()),
                Head::GaussianParams => channels(o, 0, c),
            })
            .collect()
    }

    /// Gaussian belief per frame (Gaussian head only).
    pub fn gaussian_predictions(&self, seq: &VideoSequence) -> Result<Vec<GaussianPrediction>> {
        let outs = self.predict(seq)?;
        self.gaussians(&outs)
    }

    fn gaussians(&self, outs: &[Tensor]) -> Result<Vec<GaussianPrediction>> {
        if self.head() != Head::GaussianParams {
            return Err(Error::Config("regression head has no variance output".into()));
        }
        let c = self.config.image_channels;
        outs.iter()
            .map(|o| GaussianPrediction::new(channels(o, 0, c)?, channels(o, c, c)?))
            .collect()
    }

    /// Full inference. With a Gaussian head and known noise level, the output
    /// is the posterior mean; otherwise the blind-spot prediction. Not clipped.
    pub fn denoise(&self, noisy: &VideoSequence, noise: &NoiseModel) -> Result<VideoSequence> {
        self.check_clip(noisy)?;
        let flows = self.estimate_flows(&noisy.frame_tensors())?;
        self.denoise_with_flows(noisy, noise, &flows)
    }

    /// [`denoise`](Self::denoise) with precomputed flows.
    pub fn denoise_with_flows(&self, noisy: &VideoSequence, noise: &NoiseModel, flows: &ClipFlows) -> Result<VideoSequence> {
        noise.validate()?;
        let raw = self.predict_with_flows(noisy, flows)?;
        let outs = match (self.head(), noise.kind) {
            (Head::GaussianParams, NoiseKind::GaussianKnownSigma) => {
                let sigma = noise.unit_sigma();
                self.gaussians(&raw)?
                    .iter()
                    .enumerate()
                    .map(|(t, pred)| posterior_mean(pred, &noisy.frame_tensor(t), sigma))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => self.point_estimates(&raw)?,
        };
        let mut seq = VideoSequence::from_frame_tensors(&outs)?;
        seq.frame_rate = noisy.frame_rate;
        seq.id = denoised_id(&noisy.id);
        Ok(seq)
    }

    fn check_clip(&self, seq: &VideoSequence) -> Result<()> {
        if seq.channels() != self.config.image_channels {
            return Err(Error::Input(alloc::format!(
                "model was built for {} channels, clip has {}",
                self.config.image_channels,
                seq.channels()
            )));
        }
        Ok(())
    }
}

fn denoised_id(id: &str) -> String {
    if id.is_empty() {
        "denoised".into()
    } else {
        alloc::format!("{id}.denoised")
    }
}

fn channels(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if start + len > c || n != 1 {
        return Err(Error::Shape(alloc::format!("cannot take channels {start}..{} of {:?}", start + len, t.shape())));
    }
    Tensor::from_vec([1, len, h, w], t.data()[start * h * w..(start + len) * h * w].to_vec())
}

/// Probing view: flows come from the input values and enter as constants.
impl PixelPredictor for StbnModel {
    fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
        let values: Vec<Tensor> = frames.iter().map(|&f| g.value(f).clone()).collect();
        let flows = self.estimate_flows(&values)?;
        StbnModel::forward_graph(self, g, Params::frozen(&self.params), frames, &flows)
    }
}

/// The model with every flow fixed at zero.
struct ZeroFlowView<'a>(&'a StbnModel);

impl PixelPredictor for ZeroFlowView<'_> {
    fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
        let [_, _, h, w] = g.shape(*frames.first().ok_or_else(|| Error::Input("empty clip".into()))?);
        let flows = ClipFlows::zeros(frames.len(), h, w);
        self.0.forward_graph(g, Params::frozen(&self.0.params), frames, &flows)
    }
}
