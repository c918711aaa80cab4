//! Spatial receptive field expansion: fuse both propagation directions on a
//! patch-unshuffled grid, then project back to a per-pixel prediction.
//!
//! After `patch_unshuffle(s)` each low-resolution pixel holds an `s x s` cell.
//! The residual convs here are grouped by sub-pixel phase, so phase `(dy, dx)`
//! only ever talks to the same phase of neighbouring cells. At full
//! resolution that is exactly a dilation-`s` convolution, which keeps the
//! blind spot closed whenever `gcd(s, dilation) > r` (see [`crate::blindspot`]).
//! A phase-mixing conv would read offsets of 1 and reopen it.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::blindspot::Activation;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{square_taps, ConvGeom};
use crate::nn::{Conv2d, Init, ParamStore, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Regression,
    #[default]
    GaussianParams,
}

impl Head {
    pub fn out_channels(self, image_channels: usize) -> usize {
        match self {
            Head::Regression => image_channels,
            Head::GaussianParams => 2 * image_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SRFEConfig {
    pub shuffle_factor: usize,
    pub num_residual_blocks: usize,
    pub channels: usize,
    pub head: Head,
}

impl Default for SRFEConfig {
    fn default() -> Self {
        Self {
            shuffle_factor: 2,
            num_residual_blocks: 4,
            channels: 48,
            head: Head::GaussianParams,
        }
    }
}

impl SRFEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shuffle_factor == 0 {
            return Err(Error::Config("shuffle_factor must be >= 1".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("SRFE channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Space-to-channel on an `H x W x C` row-major array. Output is
/// `(H/s) x (W/s) x (C s^2)`; channel `c * s^2 + dy * s + dx` at `(Y, X)`
/// holds input `(Y s + dy, X s + dx, c)`.
pub fn patch_unshuffle(x: &[f64], height: usize, width: usize, channels: usize, s: usize) -> Result<Vec<f64>> {
    check_hwc(x, height, width, channels, s)?;
    let (oh, ow, oc) = (height / s, width / s, channels * s * s);
    let mut out = alloc::vec![0.0; x.len()];
    for y in 0..height {
        for xx in 0..width {
            for c in 0..channels {
                let phase = (y % s) * s + xx % s;
                out[((y / s) * ow + xx / s) * oc + c * s * s + phase] = x[(y * width + xx) * channels + c];
            }
        }
    }
    debug_assert_eq!(oh * ow * oc, out.len());
    Ok(out)
}

/// Inverse of [`patch_unshuffle`]; `height`, `width`, `channels` describe the output.
pub fn patch_shuffle(x: &[f64], height: usize, width: usize, channels: usize, s: usize) -> Result<Vec<f64>> {
    check_hwc(x, height, width, channels, s)?;
    let (ow, oc) = (width / s, channels * s * s);
    let mut out = alloc::vec![0.0; x.len()];
    for y in 0..height {
        for xx in 0..width {
            for c in 0..channels {
                let phase = (y % s) * s + xx % s;
                out[(y * width + xx) * channels + c] = x[((y / s) * ow + xx / s) * oc + c * s * s + phase];
            }
        }
    }
    Ok(out)
}

fn check_hwc(x: &[f64], height: usize, width: usize, channels: usize, s: usize) -> Result<()> {
    if s == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
        return Err(Error::Shape(alloc::format!("{height}x{width} is not divisible by shuffle factor {s}")));
    }
    if x.len() != height * width * channels {
        return Err(Error::Shape(alloc::format!(
            "{height}x{width}x{channels} array needs {} values, got {}",
            height * width * channels,
            x.len()
        )));
    }
    Ok(())
}

fn conv(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    kernel: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    gain: f64,
) -> Result<Conv2d> {
    let geom = ConvGeom {
        taps: square_taps(kernel, 1, false),
        in_channels: cin,
        out_channels: cout,
        groups,
    };
    Conv2d::new(store, init, name, geom, true, gain)
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

#[derive(Clone, Debug)]
struct Expansion {
    s: usize,
    /// unshuffled channel-major -> phase-major
    to_phase: Vec<usize>,
    /// phase-major -> channel-major
    to_channel: Vec<usize>,
    entry: Conv2d,
    blocks: Vec<ResBlock>,
}

/// Fusion stage producing the per-frame network output.
#[derive(Clone, Debug)]
pub struct Srfe {
    pub config: SRFEConfig,
    pub image_channels: usize,
    activation: Activation,
    expansion: Option<Expansion>,
    head_in: Conv2d,
    head_out: Conv2d,
}

impl Srfe {
    /// `enabled = false` builds the 1x1-only fusion head (no spatial expansion).
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        config: &SRFEConfig,
        image_channels: usize,
        activation: Activation,
        enabled: bool,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.channels;
        let (expansion, head_cin) = if enabled {
            let s = config.shuffle_factor;
            let phases = s * s;
            let c2 = 2 * f;
            let to_phase = phase_major_permutation(c2, s);
            let to_channel = channel_major_permutation(f, s);
            let entry = conv(store, init, &alloc::format!("{name}.entry"), 1, phases * c2, phases * f, phases, 1.0)?;
            let blocks = (0..config.num_residual_blocks)
                .map(|i| {
                    Ok(ResBlock {
                        a: conv(store, init, &alloc::format!("{name}.res{i}.a"), 3, phases * f, phases * f, phases, 1.0)?,
                        b: conv(store, init, &alloc::format!("{name}.res{i}.b"), 3, phases * f, phases * f, phases, 0.5)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                Some(Expansion {
                    s,
                    to_phase,
                    to_channel,
                    entry,
                    blocks,
                }),
                f,
            )
        } else {
            (None, 2 * f)
        };
        let head_in = conv(store, init, &alloc::format!("{name}.head_in"), 1, head_cin, f, 1, 1.0)?;
        let head_out = conv(
            store,
            init,
            &alloc::format!("{name}.head_out"),
            1,
            f,
            config.head.out_channels(image_channels),
            1,
            1.0,
        )?;
        Ok(Self {
            config: config.clone(),
            image_channels,
            activation,
            expansion,
            head_in,
            head_out,
        })
    }

    pub fn expands(&self) -> bool {
        self.expansion.is_some()
    }

    pub fn out_channels(&self) -> usize {
        self.config.head.out_channels(self.image_channels)
    }

    /// The final projection layer (weights, bias).
    pub fn final_projection(&self) -> &Conv2d {
        &self.head_out
    }

    /// `SRFE(h_b, h_f)` for one frame; returns `[1, C_out, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: Params<'_>, h_f: Var, h_b: Var) -> Result<Var> {
        if g.shape(h_f) != g.shape(h_b) {
            return Err(Error::Shape(alloc::format!(
                "forward state {:?} vs backward state {:?}",
                g.shape(h_f),
                g.shape(h_b)
            )));
        }
        if g.shape(h_f)[1] != self.config.channels {
            return Err(Error::Shape(alloc::format!(
                "states have {} channels, SRFE expects {}",
                g.shape(h_f)[1],
                self.config.channels
            )));
        }
        let act = self.activation;
        let x = g.concat(&[h_f, h_b])?;
        let x = match &self.expansion {
            None => x,
            Some(e) => {
                let [_, _, h, w] = g.shape(x);
                let (ph, pw) = (h.div_ceil(e.s) * e.s, w.div_ceil(e.s) * e.s);
                let x = if (ph, pw) != (h, w) { g.reflect_pad(x, ph, pw)? } else { x };
                let x = g.unshuffle(x, e.s)?;
                let x = g.gather_channels(x, e.to_phase.clone())?;
                let z = e.entry.forward(g, p, x)?;
                let mut z = act.apply(g, z);
                for b in &e.blocks {
                    let u = b.a.forward(g, p, z)?;
                    let u = act.apply(g, u);
                    let u = b.b.forward(g, p, u)?;
                    z = g.add(z, u)?;
                }
                let z = g.gather_channels(z, e.to_channel.clone())?;
                let z = g.shuffle(z, e.s)?;
                if (ph, pw) != (h, w) {
                    g.crop(z, h, w)?
                } else {
                    z
                }
            }
        };
        let z = self.head_in.forward(g, p, x)?;
        let z = act.apply(g, z);
        self.head_out.forward(g, p, z)
    }
}

/// Gather indices taking the channel-major unshuffled layout (`c * s^2 + phase`)
/// to phase-major (`phase * C + c`).
pub fn phase_major_permutation(channels: usize, s: usize) -> Vec<usize> {
    let phases = s * s;
    (0..phases * channels).map(|j| (j % channels) * phases + j / channels).collect()
}

/// Inverse of [`phase_major_permutation`].
pub fn channel_major_permutation(channels: usize, s: usize) -> Vec<usize> {
    let phases = s * s;
    (0..phases * channels).map(|j| (j % phases) * channels + j / phases).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::kernels;
    use proptest::prelude::*;

    #[test]
    fn unshuffle_ordering_contract() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let u = patch_unshuffle(&x, 4, 4, 1, 2).unwrap();
        // cell (0, 0) holds samples (0,0), (0,1), (1,0), (1,1)
        assert_eq!(&u[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // cell (1, 1) holds (2,2), (2,3), (3,2), (3,3)
        assert_eq!(&u[12..16], &[10.0, 11.0, 14.0, 15.0]);
        assert_eq!(patch_unshuffle(&x, 4, 4, 1, 1).unwrap(), x);
        assert!(patch_unshuffle(&x, 4, 4, 1, 3).is_err());
    }

    #[test]
    fn matches_graph_unshuffle() {
        // HWC array functions and the NCHW kernel agree on ordering
        let (h, w, c, s) = (4, 6, 2, 2);
        let hwc: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
        let u = patch_unshuffle(&hwc, h, w, c, s).unwrap();
        let mut nchw = alloc::vec![0.0; h * w * c];
        for p in 0..h * w {
            for ci in 0..c {
                nchw[ci * h * w + p] = hwc[p * c + ci];
            }
        }
        let k = kernels::unshuffle(&nchw, 1, c, h, w, s);
        let (oh, ow, oc) = (h / s, w / s, c * s * s);
        for p in 0..oh * ow {
            for ci in 0..oc {
                assert_eq!(u[p * oc + ci], k[ci * oh * ow + p]);
            }
        }
    }

    proptest! {
        #[test]
        fn shuffle_roundtrip(
            hs in 1usize..5, ws in 1usize..5, c in 1usize..4, s in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (h, w) = (hs * s, ws * s);
            let x = crate::nn::Init::new(seed).normal([1, 1, 1, h * w * c], 1.0).into_vec();
            let u = patch_unshuffle(&x, h, w, c, s).unwrap();
            let back = patch_shuffle(&u, h, w, c, s).unwrap();
            prop_assert_eq!(back, x);
        }
    }

    fn build(enabled: bool, head: Head) -> (Srfe, ParamStore) {
        let cfg = SRFEConfig {
            channels: 4,
            num_residual_blocks: 2,
            head,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let s = Srfe::new(&mut store, &mut Init::new(2), "srfe", &cfg, 3, Activation::LeakyRelu, enabled).unwrap();
        (s, store)
    }

    #[test]
    fn zero_states_and_zero_projection_give_zero() {
        let (s, mut store) = build(true, Head::GaussianParams);
        let proj = s.final_projection().clone();
        *store.get_mut(proj.weight) = Tensor::zeros(store.get(proj.weight).shape());
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros([1, 4, 10, 10]));
        let out = s.forward(&mut g, Params::frozen(&store), h, h).unwrap();
        assert_eq!(g.shape(out), [1, 6, 10, 10]);
        assert_eq!(g.value(out).max_abs(), 0.0);
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let (s, store) = build(true, Head::Regression);
        let mut g = Graph::new();
        let h = g.constant(Init::new(1).normal([1, 4, 9, 11], 1.0));
        let out = s.forward(&mut g, Params::frozen(&store), h, h).unwrap();
        assert_eq!(g.shape(out), [1, 3, 9, 11]);
        assert!(g.value(out).is_finite());
        let bad = g.constant(Tensor::zeros([1, 4, 9, 10]));
        assert!(s.forward(&mut g, Params::frozen(&store), h, bad).is_err());
    }

    #[test]
    fn expansion_is_a_dilated_footprint() {
        // Offsets reached by the expansion from one state pixel are all on the s-lattice.
        let (s, store) = build(true, Head::Regression);
        let mut g = Graph::new();
        let h = g.input(Init::new(3).normal([1, 4, 16, 16], 1.0));
        let zero = g.constant(Tensor::zeros([1, 4, 16, 16]));
        let out = s.forward(&mut g, Params::frozen(&store), h, zero).unwrap();
        let mut seed = Tensor::zeros([1, 3, 16, 16]);
        seed.set(0, 0, 8, 8, 1.0);
        let grads = g.backward_with(out, seed);
        let gh = grads.get(h).unwrap();
        let mut support = 0;
        for y in 0..16 {
            for x in 0..16 {
                let m: f64 = (0..4).map(|c| gh.at(0, c, y, x).abs()).sum();
                if m != 0.0 {
                    support += 1;
                    assert!((y as i32 - 8) % 2 == 0 && (x as i32 - 8) % 2 == 0, "off-lattice ({y},{x})");
                }
            }
        }
        // 4 grouped 3x3 convs reach 4 cells each way; the 16x16 frame clips that to 8x8 lattice points
        assert_eq!(support, 64);
    }

    #[test]
    fn disabled_head_is_pointwise() {
        let (s, store) = build(false, Head::Regression);
        assert!(!s.expands());
        let mut g = Graph::new();
        let h = g.input(Init::new(3).normal([1, 4, 8, 8], 1.0));
        let out = s.forward(&mut g, Params::frozen(&store), h, h).unwrap();
        let mut seed = Tensor::zeros([1, 3, 8, 8]);
        seed.set(0, 1, 4, 4, 1.0);
        let gh = g.backward_with(out, seed);
        let gh = gh.get(h).unwrap();
        let nz = (0..64).filter(|&p| (0..4).any(|c| gh.data()[c * 64 + p] != 0.0)).count();
        assert_eq!(nz, 1);
    }
}
