//! Blind-spot primitives, the BSA block and dependency probing.
//!
//! The blind spot is built from two facts about tap offsets:
//!
//! * a centrally-masked `k x k` conv reads offsets in `[-r, r]^2 \ {0}` with `r = (k - 1) / 2`;
//! * a conv with dilation `d` only adds offsets on the lattice `d Z^2`.
//!
//! So once a masked conv has run, any stack of dilated convs (and 1x1 convs,
//! and pointwise activations) can reach the co-located input pixel only if
//! some masked offset lies on the lattice, i.e. only if `d <= r`. With `d > r`
//! the centre stays unreachable no matter how deep the stack grows.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{square_taps, ConvGeom};
use crate::nn::{Conv2d, Init, ParamStore, Params};
use crate::tensor::Tensor;
use crate::videodata::VideoSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    LeakyRelu,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.1;

    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.leaky_relu(x, 0.0),
            Activation::LeakyRelu => g.leaky_relu(x, Self::LEAKY_SLOPE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlindSpotLayerConfig {
    pub channels: usize,
    pub masked_kernel: usize,
    pub dilation: usize,
    pub num_dconv_blocks: usize,
    pub activation: Activation,
    /// Diagnostic switch that keeps the centre tap of every masked conv.
    /// It breaks the blind spot on purpose and exists for negative controls.
    #[serde(skip_serializing_if = "is_false")]
    pub open_center: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Default for BlindSpotLayerConfig {
    fn default() -> Self {
        Self {
            channels: 48,
            masked_kernel: 3,
            dilation: 2,
            num_dconv_blocks: 3,
            activation: Activation::LeakyRelu,
            open_center: false,
        }
    }
}

impl BlindSpotLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("blind-spot channels must be >= 1".into()));
        }
        if self.masked_kernel < 3 || self.masked_kernel.is_multiple_of(2) {
            return Err(Error::Config(alloc::format!(
                "masked kernel must be odd and >= 3, got {}",
                self.masked_kernel
            )));
        }
        if self.dilation < 2 {
            return Err(Error::Config(alloc::format!(
                "dilation after a masked conv must be >= 2, got {}",
                self.dilation
            )));
        }
        if self.dilation <= self.masked_radius() {
            return Err(Error::Config(alloc::format!(
                "dilation {} lands on the masked {}x{} footprint and would reopen the blind spot",
                self.dilation,
                self.masked_kernel,
                self.masked_kernel
            )));
        }
        Ok(())
    }

    pub fn masked_radius(&self) -> usize {
        (self.masked_kernel - 1) / 2
    }
}

/// A `k x k` convolution whose centre tap does not exist.
#[derive(Clone, Debug)]
pub struct MaskedConv {
    pub conv: Conv2d,
}

impl MaskedConv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::build(store, init, name, in_channels, out_channels, kernel, false)
    }

    /// Same layout with the centre tap present. Not blind.
    pub fn unmasked(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::build(store, init, name, in_channels, out_channels, kernel, true)
    }

    fn build(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        keep_center: bool,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel < 3 {
            return Err(Error::Config(alloc::format!("masked conv kernel must be odd and >= 3, got {kernel}")));
        }
        let geom = ConvGeom {
            taps: square_taps(kernel, 1, !keep_center),
            in_channels,
            out_channels,
            groups: 1,
        };
        Ok(Self {
            conv: Conv2d::new(store, init, name, geom, true, 1.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }
}

fn dense(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    dilation: usize,
    gain: f64,
) -> Result<Conv2d> {
    let geom = ConvGeom {
        taps: square_taps(kernel, dilation, false),
        in_channels: cin,
        out_channels: cout,
        groups: 1,
    };
    Conv2d::new(store, init, name, geom, true, gain)
}

fn first_conv(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    cin: usize,
    cout: usize,
    config: &BlindSpotLayerConfig,
) -> Result<MaskedConv> {
    if config.open_center {
        MaskedConv::unmasked(store, init, name, cin, cout, config.masked_kernel)
    } else {
        MaskedConv::new(store, init, name, cin, cout, config.masked_kernel)
    }
}

#[derive(Clone, Debug)]
struct DconvBlock {
    dilated: Conv2d,
    pointwise: Conv2d,
}

/// Blind-spot alignment block.
///
/// ```text
/// concat(y_t, h) -> masked conv -> act
///   -> num_dconv_blocks x [ z + 1x1(act(dilated conv(z))) ]
///   -> concat(., h) -> dilated conv -> act -> 1x1 -> act
/// ```
///
/// `h` is the warped recurrent state. It never depends on `y_t`, so the
/// closing block may read `h` at the co-located pixel; `y_t` itself only
/// enters through the masked conv.
#[derive(Clone, Debug)]
pub struct BsaBlock {
    pub config: BlindSpotLayerConfig,
    pub frame_channels: usize,
    masked: MaskedConv,
    blocks: Vec<DconvBlock>,
    fuse: Conv2d,
    fuse_out: Conv2d,
}

impl BsaBlock {
    /// `recurrent_gain` scales the initial weights that read the recurrent
    /// state, keeping the untrained recurrence contractive.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        frame_channels: usize,
        config: &BlindSpotLayerConfig,
        recurrent_gain: f64,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.channels;
        let masked = first_conv(store, init, &alloc::format!("{name}.masked"), frame_channels + f, f, config)?;
        masked.conv.scale_input_channels(store, frame_channels, f, recurrent_gain);
        let mut blocks = Vec::with_capacity(config.num_dconv_blocks);
        for b in 0..config.num_dconv_blocks {
            blocks.push(DconvBlock {
                dilated: dense(store, init, &alloc::format!("{name}.dconv{b}"), f, f, 3, config.dilation, 1.0)?,
                // residual branch starts small so depth does not blow up activations
                pointwise: dense(store, init, &alloc::format!("{name}.pw{b}"), f, f, 1, 1, 0.5)?,
            });
        }
        let fuse = dense(store, init, &alloc::format!("{name}.fuse"), 2 * f, f, 3, config.dilation, 1.0)?;
        fuse.scale_input_channels(store, f, f, recurrent_gain);
        let fuse_out = dense(store, init, &alloc::format!("{name}.fuse_out"), f, f, 1, 1, 1.0)?;
        Ok(Self {
            config: config.clone(),
            frame_channels,
            masked,
            blocks,
            fuse,
            fuse_out,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.config.channels
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, y_t: Var, h_warped: Var) -> Result<Var> {
        let (ys, hs) = (g.shape(y_t), g.shape(h_warped));
        if ys[2..] != hs[2..] || ys[0] != hs[0] {
            return Err(Error::Shape(alloc::format!("BSA inputs {ys:?} and {hs:?} are not aligned")));
        }
        if ys[1] != self.frame_channels || hs[1] != self.config.channels {
            return Err(Error::Shape(alloc::format!(
                "BSA expects {}+{} channels, got {}+{}",
                self.frame_channels,
                self.config.channels,
                ys[1],
                hs[1]
            )));
        }
        let act = self.config.activation;
        let x = g.concat(&[y_t, h_warped])?;
        let z = self.masked.forward(g, p, x)?;
        let mut z = act.apply(g, z);
        for b in &self.blocks {
            let u = b.dilated.forward(g, p, z)?;
            let u = act.apply(g, u);
            let u = b.pointwise.forward(g, p, u)?;
            z = g.add(z, u)?;
        }
        let x = g.concat(&[z, h_warped])?;
        let u = self.fuse.forward(g, p, x)?;
        let u = act.apply(g, u);
        let u = self.fuse_out.forward(g, p, u)?;
        Ok(act.apply(g, u))
    }
}

/// One step of a recurrence: combines frame `y_t` with the state warped from
/// the neighbouring frame into the new state.
pub trait RecurrentCell {
    fn hidden_channels(&self) -> usize;

    fn step(&self, g: &mut Graph, p: Params<'_>, y_t: Var, h_warped: Var) -> Result<Var>;
}

impl RecurrentCell for BsaBlock {
    fn hidden_channels(&self) -> usize {
        self.config.channels
    }

    fn step(&self, g: &mut Graph, p: Params<'_>, y_t: Var, h_warped: Var) -> Result<Var> {
        self.forward(g, p, y_t, h_warped)
    }
}

/// Plain recurrent blind-spot cell used when the BSA block is switched off:
///
/// ```text
/// concat(y_t, h) -> masked conv -> act -> 1x1 -> act
/// ```
///
/// The mask hides the co-located pixel of `h` as well as of `y_t`, so
/// temporal information only arrives from neighbouring positions.
#[derive(Clone, Debug)]
pub struct PlainBlindSpot {
    frame_channels: usize,
    channels: usize,
    masked: MaskedConv,
    pointwise: Conv2d,
    activation: Activation,
}

impl PlainBlindSpot {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        frame_channels: usize,
        config: &BlindSpotLayerConfig,
        recurrent_gain: f64,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.channels;
        let masked = first_conv(store, init, &alloc::format!("{name}.masked"), frame_channels + f, f, config)?;
        masked.conv.scale_input_channels(store, frame_channels, f, recurrent_gain);
        Ok(Self {
            frame_channels,
            channels: f,
            masked,
            pointwise: dense(store, init, &alloc::format!("{name}.pw"), f, f, 1, 1, 1.0)?,
            activation: config.activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, y_t: Var, h_warped: Var) -> Result<Var> {
        let (ys, hs) = (g.shape(y_t), g.shape(h_warped));
        if ys[1] != self.frame_channels || hs[1] != self.channels || ys[2..] != hs[2..] {
            return Err(Error::Shape(alloc::format!("plain cell inputs {ys:?} and {hs:?}")));
        }
        let x = g.concat(&[y_t, h_warped])?;
        let z = self.masked.forward(g, p, x)?;
        let z = self.activation.apply(g, z);
        let z = self.pointwise.forward(g, p, z)?;
        Ok(self.activation.apply(g, z))
    }
}

impl RecurrentCell for PlainBlindSpot {
    fn hidden_channels(&self) -> usize {
        self.channels
    }

    fn step(&self, g: &mut Graph, p: Params<'_>, y_t: Var, h_warped: Var) -> Result<Var> {
        self.forward(g, p, y_t, h_warped)
    }
}

/// Anything that maps a clip to per-frame outputs through a [`Graph`].
pub trait PixelPredictor {
    /// Builds the forward pass. `frames` are `[1, C, H, W]` nodes; returns one
    /// `[1, C_out, H, W]` node per frame.
    fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>>;

    fn is_differentiable(&self) -> bool {
        true
    }
}

/// Returns every frame unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPredictor;

impl PixelPredictor for IdentityPredictor {
    fn forward_graph(&self, _g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
        Ok(frames.to_vec())
    }
}

/// Pixel position `(t, y, x)` in a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLocation {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl ProbeLocation {
    pub fn new(t: usize, y: usize, x: usize) -> Self {
        Self { t, y, x }
    }
}

/// `|d output(probe) / d input(source_frame, .)|`, summed over input channels,
/// maximised over output channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyMap {
    pub height: usize,
    pub width: usize,
    pub magnitudes: Vec<f64>,
    pub probe_location: ProbeLocation,
    pub source_frame: usize,
}

impl DependencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.magnitudes[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.magnitudes.iter().sum()
    }

    /// Number of pixels with nonzero dependency.
    pub fn support(&self) -> usize {
        self.magnitudes.iter().filter(|&&m| m != 0.0).count()
    }

    pub fn support_set(&self) -> Vec<bool> {
        self.magnitudes.iter().map(|&m| m != 0.0).collect()
    }
}

fn check_probe(input: &VideoSequence, probe: ProbeLocation) -> Result<()> {
    if probe.t >= input.frames() || probe.y >= input.height() || probe.x >= input.width() {
        return Err(Error::Input(alloc::format!("probe {probe:?} outside clip {:?}", input.dims())));
    }
    Ok(())
}

/// Backpropagates from `output(probe)` to every input pixel of every frame.
pub fn probe_dependency<M: PixelPredictor + ?Sized>(
    model: &M,
    input: &VideoSequence,
    probe: ProbeLocation,
) -> Result<Vec<DependencyMap>> {
    Ok(probe_many(model, input, &[probe])?.pop().expect("one probe"))
}

/// [`probe_dependency`] for several probes sharing one forward pass.
pub fn probe_many<M: PixelPredictor + ?Sized>(
    model: &M,
    input: &VideoSequence,
    probes: &[ProbeLocation],
) -> Result<Vec<Vec<DependencyMap>>> {
    if !model.is_differentiable() {
        return Err(Error::Input("model is not differentiable".into()));
    }
    for &probe in probes {
        check_probe(input, probe)?;
    }
    let mut g = Graph::new();
    let frames: Vec<Var> = input.frame_tensors().into_iter().map(|f| g.input(f)).collect();
    let outputs = model.forward_graph(&mut g, &frames)?;
    if outputs.len() != frames.len() {
        return Err(Error::Shape("model returned a different number of frames than it was given".into()));
    }
    let (h, w) = (input.height(), input.width());
    let mut all = Vec::with_capacity(probes.len());
    for &probe in probes {
        let out = outputs[probe.t];
        let shape = g.shape(out);
        let mut maps: Vec<DependencyMap> = (0..input.frames())
            .map(|k| DependencyMap {
                height: h,
                width: w,
                magnitudes: vec![0.0; h * w],
                probe_location: probe,
                source_frame: k,
            })
            .collect();
        for c in 0..shape[1] {
            let mut seed = Tensor::zeros(shape);
            seed.set(0, c, probe.y, probe.x, 1.0);
            let grads = g.backward_with(out, seed);
            for (k, &fv) in frames.iter().enumerate() {
                let Some(gt) = grads.get(fv) else { continue };
                let map = &mut maps[k].magnitudes;
                for (p, m) in map.iter_mut().enumerate() {
                    let s: f64 = (0..gt.c()).map(|ci| gt.data()[ci * h * w + p].abs()).sum();
                    if s > *m {
                        *m = s;
                    }
                }
            }
        }
        if maps.iter().any(|m| m.magnitudes.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("dependency map".into()));
        }
        all.push(maps);
    }
    Ok(all)
}

fn output_values<M: PixelPredictor + ?Sized>(model: &M, seq: &VideoSequence, probe: ProbeLocation) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let frames: Vec<Var> = seq.frame_tensors().into_iter().map(|f| g.constant(f)).collect();
    let outputs = model.forward_graph(&mut g, &frames)?;
    let v = g.value(outputs[probe.t]);
    Ok((0..v.c()).map(|c| v.at(0, c, probe.y, probe.x)).collect())
}

/// Central finite difference of `output(probe)` with respect to the
/// co-located input pixel `y(probe)`. Returns the largest `|d out_c / d y_ci|`.
pub fn center_finite_difference<M: PixelPredictor + ?Sized>(
    model: &M,
    input: &VideoSequence,
    probe: ProbeLocation,
    step: f64,
) -> Result<f64> {
    check_probe(input, probe)?;
    let [t, h, w, c] = input.dims();
    let mut worst: f64 = 0.0;
    for ci in 0..c {
        let idx = ((probe.t * h + probe.y) * w + probe.x) * c + ci;
        let shifted = |delta: f64| -> Result<Vec<f64>> {
            let mut data = input.data().to_vec();
            // perturb in f32 storage; the realised step is what we divide by
            data[idx] = (data[idx] as f64 + delta) as f32;
            let seq = VideoSequence::new(t, h, w, c, data)?;
            output_values(model, &seq, probe)
        };
        let base = input.data()[idx] as f64;
        let up = shifted(step)?;
        let down = shifted(-step)?;
        let realised = ((base + step) as f32 as f64) - ((base - step) as f32 as f64);
        for (a, b) in up.iter().zip(&down) {
            worst = worst.max(((a - b) / realised).abs());
        }
    }
    Ok(worst)
}

/// Outcome of certifying one probe location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub probe: ProbeLocation,
    /// Autodiff `|d out / d y|` at the co-located pixel.
    pub center_gradient: f64,
    /// Total dependency mass on frames other than `probe.t`.
    pub other_frame_mass: f64,
}

impl ProbeVerdict {
    pub fn blind(&self) -> bool {
        self.center_gradient == 0.0
    }
}

/// Runs [`probe_dependency`] at each location and reports the centre gradient.
pub fn certify<M: PixelPredictor + ?Sized>(
    model: &M,
    input: &VideoSequence,
    probes: &[ProbeLocation],
) -> Result<Vec<ProbeVerdict>> {
    Ok(probe_many(model, input, probes)?
        .into_iter()
        .zip(probes)
        .map(|(maps, &probe)| {
            let other = maps.iter().filter(|m| m.source_frame != probe.t).map(DependencyMap::total).sum();
            ProbeVerdict {
                probe,
                center_gradient: maps[probe.t].at(probe.y, probe.x),
                other_frame_mass: other,
            }
        })
        .collect())
}

/// Fails with [`Error::BlindSpotViolation`] if any verdict saw its own pixel.
pub fn require_blind(verdicts: &[ProbeVerdict]) -> Result<()> {
    match verdicts.iter().find(|v| !v.blind()) {
        None => Ok(()),
        Some(v) => Err(Error::BlindSpotViolation(alloc::format!(
            "output at {:?} has gradient {:.3e} w.r.t. its own noisy pixel",
            v.probe,
            v.center_gradient
        ))),
    }
}

/// Human-readable name for error messages.
pub fn describe(config: &BlindSpotLayerConfig) -> String {
    alloc::format!(
        "{}x{} masked, {} x dilation-{} blocks, {} channels",
        config.masked_kernel,
        config.masked_kernel,
        config.num_dconv_blocks,
        config.dilation,
        config.channels
    ) + if config.open_center { " (centre tap open)" } else { "" }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videodata::TranslatingTexture;
    use alloc::collections::BTreeSet;

    fn cfg(channels: usize, blocks: usize) -> BlindSpotLayerConfig {
        BlindSpotLayerConfig {
            channels,
            num_dconv_blocks: blocks,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(4, 3).validate().is_ok());
        let mut c = cfg(4, 3);
        c.masked_kernel = 4;
        assert!(c.validate().is_err());
        c.masked_kernel = 5;
        assert!(c.validate().is_err(), "dilation 2 reaches the 5x5 ring");
        c.dilation = 3;
        assert!(c.validate().is_ok());
        c.dilation = 1;
        assert!(c.validate().is_err());
        let mut store = ParamStore::new();
        assert!(MaskedConv::new(&mut store, &mut Init::new(0), "m", 1, 1, 2).is_err());
    }

    #[test]
    fn masked_conv_impulse_response() {
        let mut store = ParamStore::new();
        let m = MaskedConv::new(&mut store, &mut Init::new(3), "m", 1, 1, 3).unwrap();
        assert_eq!(store.get(m.conv.weight).len(), 8, "centre tap is not a parameter");
        let mut x = Tensor::zeros([1, 1, 7, 7]);
        x.set(0, 0, 3, 3, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = m.forward(&mut g, Params::frozen(&store), xv).unwrap();
        let y = g.value(y);
        let bias = store.get(m.conv.bias.unwrap()).data()[0];
        assert_eq!(y.at(0, 0, 3, 3), bias);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if (dy, dx) != (0, 0) {
                    let v = y.at(0, 0, (3 + dy) as usize, (3 + dx) as usize);
                    assert!((v - bias).abs() > 1e-6);
                }
            }
        }
        assert_eq!(y.at(0, 0, 0, 0), bias);
    }

    struct SingleFrame<F: Fn(&mut Graph, Var) -> Result<Var>>(F);

    impl<F: Fn(&mut Graph, Var) -> Result<Var>> PixelPredictor for SingleFrame<F> {
        fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
            frames.iter().map(|&f| (self.0)(g, f)).collect()
        }
    }

    fn noise_clip(t: usize, h: usize, w: usize, c: usize, seed: u64) -> VideoSequence {
        let mut init = Init::new(seed);
        let data = init.normal([1, 1, 1, t * h * w * c], 0.5).into_vec();
        VideoSequence::new(t, h, w, c, data.into_iter().map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn masked_conv_finite_difference_is_zero() {
        let mut store = ParamStore::new();
        let m = MaskedConv::new(&mut store, &mut Init::new(5), "m", 3, 2, 3).unwrap();
        let model = SingleFrame(|g: &mut Graph, x| m.forward(g, Params::frozen(&store), x));
        let clip = noise_clip(1, 9, 9, 3, 2);
        let probe = ProbeLocation::new(0, 4, 4);
        let fd = center_finite_difference(&model, &clip, probe, 1e-3).unwrap();
        assert!(fd < 1e-7, "fd {fd}");
        let maps = probe_dependency(&model, &clip, probe).unwrap();
        assert_eq!(maps[0].at(4, 4), 0.0);
        assert_eq!(maps[0].support(), 8);
    }

    #[test]
    fn identity_probe_is_one_hot() {
        let clip = noise_clip(3, 8, 8, 1, 4);
        let maps = probe_dependency(&IdentityPredictor, &clip, ProbeLocation::new(1, 2, 5)).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].support(), 0);
        assert_eq!(maps[2].support(), 0);
        assert_eq!(maps[1].support(), 1);
        assert_eq!(maps[1].at(2, 5), 1.0);
        assert!(probe_dependency(&IdentityPredictor, &clip, ProbeLocation::new(3, 0, 0)).is_err());
    }

    struct Bsa<'a> {
        block: &'a BsaBlock,
        store: &'a ParamStore,
    }

    /// Frame 0 is `y_t` (1 channel), frame 1 broadcast to `F` channels is `h`.
    impl PixelPredictor for Bsa<'_> {
        fn forward_graph(&self, g: &mut Graph, frames: &[Var]) -> Result<Vec<Var>> {
            let f = self.block.hidden_channels();
            let h = g.concat(&vec![frames[1]; f])?;
            let out = self.block.forward(g, Params::frozen(self.store), frames[0], h)?;
            Ok(vec![out, out])
        }
    }

    fn bsa(blocks: usize, seed: u64) -> (BsaBlock, ParamStore) {
        let mut store = ParamStore::new();
        let block = BsaBlock::new(&mut store, &mut Init::new(seed), "bsa", 1, &cfg(4, blocks), 1.0).unwrap();
        (block, store)
    }

    /// Offsets reachable through the BSA `y_t` path by set propagation.
    fn reachable_from_frame(blocks: usize) -> BTreeSet<(i32, i32)> {
        let mut set: BTreeSet<(i32, i32)> = square_taps(3, 1, true).into_iter().collect();
        let dil = square_taps(3, 2, false);
        let grow = |s: &BTreeSet<(i32, i32)>| {
            let mut out = s.clone();
            for &(a, b) in s {
                for &(c, d) in &dil {
                    out.insert((a + c, b + d));
                }
            }
            out
        };
        for _ in 0..blocks {
            set = grow(&set);
        }
        grow(&set)
    }

    #[test]
    fn bsa_footprint_matches_reachability() {
        for blocks in [1, 2] {
            let (block, store) = bsa(blocks, 7);
            let model = Bsa { block: &block, store: &store };
            let (h, w) = (33, 33);
            let clip = noise_clip(2, h, w, 1, 9);
            let maps = probe_dependency(&model, &clip, ProbeLocation::new(0, 16, 16)).unwrap();
            let expected = reachable_from_frame(blocks);
            let got: BTreeSet<(i32, i32)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| maps[0].at(y, x) != 0.0)
                .map(|(y, x)| (y as i32 - 16, x as i32 - 16))
                .collect();
            assert!(!got.contains(&(0, 0)));
            assert_eq!(got, expected, "blocks={blocks}");
        }
    }

    #[test]
    fn bsa_blind_to_frame_but_not_to_state() {
        for seed in 0..3 {
            let (block, store) = bsa(3, seed);
            let model = Bsa { block: &block, store: &store };
            let clip = noise_clip(2, 24, 24, 1, 100 + seed);
            let probe = ProbeLocation::new(0, 12, 11);
            let maps = probe_dependency(&model, &clip, probe).unwrap();
            assert_eq!(maps[0].at(12, 11), 0.0);
            assert!(maps[1].at(12, 11) > 0.0, "seed {seed}: state not read at its own pixel");
            let fd = center_finite_difference(&model, &clip, probe, 1e-3).unwrap();
            assert!(fd <= 1e-6, "fd {fd}");
        }
    }

    #[test]
    fn zero_state_impulse_gives_blind_output() {
        let (block, store) = bsa(3, 1);
        let mut y = Tensor::zeros([1, 1, 16, 16]);
        y.set(0, 0, 8, 8, 1.0);
        let run = |y: Tensor| {
            let mut g = Graph::new();
            let yv = g.constant(y);
            let h = g.constant(Tensor::zeros([1, 4, 16, 16]));
            let o = block.forward(&mut g, Params::frozen(&store), yv, h).unwrap();
            g.value(o).clone()
        };
        let with = run(y);
        let without = run(Tensor::zeros([1, 1, 16, 16]));
        for c in 0..4 {
            assert_eq!(with.at(0, c, 8, 8), without.at(0, c, 8, 8));
        }
    }

    #[test]
    fn footprint_grows_with_depth() {
        let clip = noise_clip(2, 33, 33, 1, 3);
        let mut prev: Option<Vec<bool>> = None;
        for blocks in 0..4 {
            let (block, store) = bsa(blocks, 11);
            let model = Bsa { block: &block, store: &store };
            let maps = probe_dependency(&model, &clip, ProbeLocation::new(0, 16, 16)).unwrap();
            let set = maps[0].support_set();
            if let Some(p) = &prev {
                assert!(p.iter().zip(&set).all(|(a, b)| !a || *b), "not a superset at {blocks}");
                assert!(set.iter().filter(|&&b| b).count() > p.iter().filter(|&&b| b).count());
            }
            prev = Some(set);
        }
    }

    #[test]
    fn probe_on_texture_is_finite() {
        let clip = TranslatingTexture::new(16, 16, 3, (1.0, 0.0), 3, 0).render(2).unwrap();
        let mut store = ParamStore::new();
        let plain = PlainBlindSpot::new(&mut store, &mut Init::new(1), "p", 3, &cfg(4, 1), 1.0).unwrap();
        let model = SingleFrame(|g: &mut Graph, x| {
            let [_, _, h, w] = g.shape(x);
            let zero = g.constant(Tensor::zeros([1, 4, h, w]));
            plain.forward(g, Params::frozen(&store), x, zero)
        });
        let v = certify(&model, &clip, &[ProbeLocation::new(1, 8, 8)]).unwrap();
        assert!(require_blind(&v).is_ok());
        assert_eq!(v[0].other_frame_mass, 0.0);
    }
}
