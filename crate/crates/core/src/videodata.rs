//! Video sequences, noise models, noise synthesis and training crops.

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest allowed frame height / width.
pub const MIN_SIDE: usize = 8;

/// A `T x H x W x C` clip with intensities on the `[0, 1]` scale.
///
/// Storage is `f32`, row-major in `(t, y, x, c)` order. Noisy clips may leave
/// `[0, 1]`; nothing in the pipeline clips them before the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
    pub frame_rate: Option<f64>,
    pub id: String,
}

impl VideoSequence {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Input("a sequence needs at least one frame".into()));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Input(alloc::format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Input(alloc::format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::Shape(alloc::format!(
                "{frames}x{height}x{width}x{channels} sequence needs {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence data".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            frame_rate: None,
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[T, H, W, C]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Whether every value lies in `[0, 1]` (the clean-sequence contract).
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Frame `t` as a `[1, C, H, W]` tensor.
    pub fn frame_tensor(&self, t: usize) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Tensor::zeros([1, c, h, w]);
        let frame = &self.data[t * h * w * c..(t + 1) * h * w * c];
        for (p, px) in frame.chunks(c).enumerate() {
            for (ci, &v) in px.iter().enumerate() {
                out.data_mut()[ci * h * w + p] = v as f64;
            }
        }
        out
    }

    /// Every frame as a `[1, C, H, W]` tensor.
    pub fn frame_tensors(&self) -> Vec<Tensor> {
        (0..self.frames).map(|t| self.frame_tensor(t)).collect()
    }

    /// Reassembles a sequence from `[1, C, H, W]` frames.
    pub fn from_frame_tensors(frames: &[Tensor]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Input("no frames".into()))?;
        let [_, c, h, w] = first.shape();
        let mut data = Vec::with_capacity(frames.len() * h * w * c);
        for f in frames {
            if f.shape() != [1, c, h, w] {
                return Err(Error::Shape(alloc::format!(
                    "frame {:?} vs {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
            for p in 0..h * w {
                for ci in 0..c {
                    data.push(f.data()[ci * h * w + p] as f32);
                }
            }
        }
        Self::new(frames.len(), h, w, c, data)
    }

    /// A copy with every value clipped to `[0, 1]` (for 8-bit export only).
    pub fn clipped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Contiguous sub-clip `[t0, t0 + length)` cropped to `size x size` at `(y0, x0)`.
    pub fn window(&self, t0: usize, length: usize, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if t0 + length > self.frames || y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Input(alloc::format!(
                "window t{t0}+{length}, y{y0}+{height}, x{x0}+{width} exceeds {:?}",
                self.dims()
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(length * height * width * c);
        for t in t0..t0 + length {
            for y in y0..y0 + height {
                let row = ((t * self.height + y) * self.width + x0) * c;
                data.extend_from_slice(&self.data[row..row + width * c]);
            }
        }
        let mut out = Self::new(length, height, width, c, data)?;
        out.frame_rate = self.frame_rate;
        out.id = self.id.clone();
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianKnownSigma,
    Unknown,
}

/// Description of the corruption applied to (or present in) a clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Standard deviation on the 8-bit (0-255) scale; present iff the kind is
    /// `GaussianKnownSigma`.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        let m = Self {
            kind: NoiseKind::GaussianKnownSigma,
            sigma: Some(sigma),
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn unknown(seed: u64) -> Self {
        Self {
            kind: NoiseKind::Unknown,
            sigma: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.sigma) {
            (NoiseKind::GaussianKnownSigma, Some(s)) if s > 0.0 && s.is_finite() => Ok(()),
            (NoiseKind::GaussianKnownSigma, _) => Err(Error::Config("gaussian noise needs sigma > 0".into())),
            (NoiseKind::Unknown, None) => Ok(()),
            (NoiseKind::Unknown, Some(_)) => Err(Error::Config("unknown noise kind cannot carry a sigma".into())),
        }
    }

    /// Sigma on the internal `[0, 1]` intensity scale.
    pub fn unit_sigma(&self) -> Option<f64> {
        match self.kind {
            NoiseKind::GaussianKnownSigma => self.sigma.map(|s| s / 255.0),
            NoiseKind::Unknown => None,
        }
    }
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

#[inline]
fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1] and [0, 1) uniforms from the top 53 bits
    let u1 = ((rng.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Standard-normal draw addressed by `(seed, t, index)`, where `index` is the
/// flat `(y, x, c)` offset inside frame `t`. Each draw consumes exactly two
/// 64-bit words of the ChaCha stream `t`, so this equals the sequential draw
/// used by [`add_awgn`].
pub fn keyed_normal(seed: u64, t: usize, index: usize) -> f64 {
    let mut rng = frame_rng(seed, t);
    rng.set_word_pos(4 * index as u128);
    box_muller(&mut rng)
}

/// Adds i.i.d. `N(0, (sigma / 255)^2)` noise to every pixel and channel. No clipping.
pub fn add_awgn(clean: &VideoSequence, model: &NoiseModel) -> Result<VideoSequence> {
    model.validate()?;
    let sigma = model
        .unit_sigma()
        .ok_or_else(|| Error::Config("cannot synthesise noise of unknown kind".into()))?;
    let per_frame = clean.height * clean.width * clean.channels;
    let mut data = Vec::with_capacity(clean.data.len());
    for t in 0..clean.frames {
        let mut rng = frame_rng(model.seed, t);
        for &v in &clean.data[t * per_frame..(t + 1) * per_frame] {
            data.push((v as f64 + sigma * box_muller(&mut rng)) as f32);
        }
    }
    let mut out = VideoSequence::new(clean.frames, clean.height, clean.width, clean.channels, data)?;
    out.frame_rate = clean.frame_rate;
    out.id = clean.id.clone();
    Ok(out)
}

/// Temporally contiguous, spatially aligned random crop.
pub fn crop_training_batch(seq: &VideoSequence, length: usize, size: usize, seed: u64) -> Result<VideoSequence> {
    if length == 0 || length > seq.frames || size > seq.height.min(seq.width) {
        return Err(Error::Input(alloc::format!(
            "crop {length}x{size}x{size} larger than source {:?}",
            seq.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |range: usize| (rng.next_u64() % (range as u64 + 1)) as usize;
    let t0 = pick(seq.frames - length);
    let y0 = pick(seq.height - size);
    let x0 = pick(seq.width - size);
    seq.window(t0, length, y0, x0, size, size)
}

/// One sinusoidal component of a periodic texture.
#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    channel_gain: [f64; 3],
}

/// A periodic band-limited texture translating at constant velocity, so the
/// true optical flow is known everywhere. Frame `t` is
/// `texture(x - vx * t, y - vy * t)`.
#[derive(Clone, Debug)]
pub struct TranslatingTexture {
    waves: Vec<Wave>,
    height: usize,
    width: usize,
    channels: usize,
    /// Empirical `(min, max)` of the raw wave sum over one period.
    range: (f64, f64),
    pub velocity: (f64, f64),
}

impl TranslatingTexture {
    /// `max_cycles` bounds the spatial frequency (cycles per frame width).
    pub fn new(height: usize, width: usize, channels: usize, velocity: (f64, f64), max_cycles: u64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let waves = (0..12)
            .map(|_| {
                let kx = libm::floor(unit() * (2 * max_cycles + 1) as f64) as i64 - max_cycles as i64;
                let ky = libm::floor(unit() * (2 * max_cycles + 1) as f64) as i64 - max_cycles as i64;
                let (kx, ky) = if kx == 0 && ky == 0 { (1, 0) } else { (kx, ky) };
                let k = libm::hypot(kx as f64, ky as f64);
                Wave {
                    fx: kx as f64 / width as f64,
                    fy: ky as f64 / height as f64,
                    phase: unit() * 2.0 * core::f64::consts::PI,
                    amp: 1.0 / (0.5 + k),
                    channel_gain: [0.6 + 0.4 * unit(), 0.6 + 0.4 * unit(), 0.6 + 0.4 * unit()],
                }
            })
            .collect();
        let mut tex = Self {
            waves,
            height,
            width,
            channels,
            range: (0.0, 1.0),
            velocity,
        };
        // the texture is periodic over the frame, so a 2x oversampled grid over
        // one period sees (almost) its full range
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..2 * height {
            for x in 0..2 * width {
                for c in 0..channels {
                    let v = tex.raw(x as f64 * 0.5, y as f64 * 0.5, c);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        tex.range = (lo, hi);
        tex
    }

    fn raw(&self, x: f64, y: f64, c: usize) -> f64 {
        self.waves
            .iter()
            .map(|w| {
                w.amp * w.channel_gain[c]
                    * libm::cos(2.0 * core::f64::consts::PI * (w.fx * x + w.fy * y) + w.phase)
            })
            .sum()
    }

    /// Intensity stretched to roughly `[0.1, 0.9]`, clipped to `[0, 1]`.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (lo, hi) = self.range;
        (0.1 + 0.8 * (self.raw(x, y, c) - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    pub fn render(&self, frames: usize) -> Result<VideoSequence> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(frames * h * w * c);
        for t in 0..frames {
            let (ox, oy) = (self.velocity.0 * t as f64, self.velocity.1 * t as f64);
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        data.push(self.sample(x as f64 - ox, y as f64 - oy, ci) as f32);
                    }
                }
            }
        }
        Ok(VideoSequence::new(frames, h, w, c, data)?.with_id("translating-texture"))
    }
}
