//! Monte-Carlo check of the blind-spot risk identity.
//!
//! With `y = x + n`, zero-mean noise independent across pixels and a
//! prediction `f(y)_i` that does not depend on `n_i`,
//!
//! ```text
//! E|f(y) - y|^2 = E|f(y) - x|^2 + E[n^2] - 2 E[n_i (f(y)_i - x_i)]
//!              = E|f(y) - x|^2 + sigma^2
//! ```
//!
//! so the self-supervised risk exceeds the supervised one by exactly the
//! noise variance. A predictor that can see `n_i` makes the cross term
//! positive and the gap shrinks.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::blindspot::{certify, require_blind, ProbeLocation};
use crate::error::{Error, Result};
use crate::model::StbnModel;
use crate::tensor::Tensor;
use crate::videodata::{add_awgn, NoiseModel, VideoSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskGapReport {
    /// `self_supervised_risk - supervised_risk`.
    pub gap_estimate: f64,
    /// `(sigma / 255)^2`.
    pub expected_constant: f64,
    /// `|gap - c| / c`.
    pub relative_error: f64,
    /// Mean `(f(y) - y)^2`.
    pub self_supervised_risk: f64,
    /// Mean `(f(y) - x)^2`.
    pub supervised_risk: f64,
    /// Samples averaged (pixels x channels x noise realisations).
    pub pixel_draws: usize,
    pub noise_realisations: usize,
    /// Whether the blind spot was certified by gradient probes first.
    pub certified: bool,
}

/// Risk gap of an arbitrary predictor. `predict` maps a noisy clip to one
/// `[1, C, H, W]` tensor per frame. At least `num_pixel_draws` samples are
/// averaged; noise realisation `r` uses seed `seed + r`.
pub fn risk_gap_with(
    mut predict: impl FnMut(&VideoSequence) -> Result<Vec<Tensor>>,
    clean: &VideoSequence,
    sigma: f64,
    num_pixel_draws: usize,
    seed: u64,
) -> Result<RiskGapReport> {
    let per_clip = clean.data().len();
    let realisations = num_pixel_draws.div_ceil(per_clip).max(1);
    let clean_frames = clean.frame_tensors();
    let (mut self_sum, mut sup_sum) = (0.0, 0.0);
    for r in 0..realisations {
        let noisy = add_awgn(clean, &NoiseModel::gaussian(sigma, seed.wrapping_add(r as u64))?)?;
        let pred = predict(&noisy)?;
        if pred.len() != clean.frames() {
            return Err(Error::Shape("predictor returned the wrong number of frames".into()));
        }
        for (t, (f, x)) in pred.iter().zip(&clean_frames).enumerate() {
            if f.shape() != x.shape() {
                return Err(Error::Shape(alloc::format!("prediction {:?} vs frame {:?}", f.shape(), x.shape())));
            }
            let y = noisy.frame_tensor(t);
            for ((fv, xv), yv) in f.data().iter().zip(x.data()).zip(y.data()) {
                self_sum += (fv - yv) * (fv - yv);
                sup_sum += (fv - xv) * (fv - xv);
            }
        }
    }
    let n = (realisations * per_clip) as f64;
    let (self_risk, sup_risk) = (self_sum / n, sup_sum / n);
    if !(self_risk.is_finite() && sup_risk.is_finite()) {
        return Err(Error::NonFinite("risk estimate".into()));
    }
    let c = (sigma / 255.0) * (sigma / 255.0);
    let gap = self_risk - sup_risk;
    Ok(RiskGapReport {
        gap_estimate: gap,
        expected_constant: c,
        relative_error: (gap - c).abs() / c,
        self_supervised_risk: self_risk,
        supervised_risk: sup_risk,
        pixel_draws: realisations * per_clip,
        noise_realisations: realisations,
        certified: false,
    })
}

/// Probe locations spread over the interior of every frame.
fn interior_probes(clip: &VideoSequence) -> Vec<ProbeLocation> {
    let (h, w) = (clip.height(), clip.width());
    (0..clip.frames())
        .flat_map(|t| [ProbeLocation::new(t, h / 2, w / 2), ProbeLocation::new(t, h / 3, (2 * w) / 3)])
        .collect()
}

/// Risk gap of the model's blind-spot prediction (`mu` for the Gaussian head).
///
/// Refuses to report unless gradient probes on a noisy draw certify that no
/// probed output depends on its own noisy pixel: the identity only holds for
/// blind predictors.
pub fn verify_risk_gap(
    model: &StbnModel,
    clean: &VideoSequence,
    sigma: f64,
    num_pixel_draws: usize,
    seed: u64,
) -> Result<RiskGapReport> {
    let probe_clip = add_awgn(clean, &NoiseModel::gaussian(sigma, seed)?)?;
    require_blind(&certify(model, &probe_clip, &interior_probes(&probe_clip))?)?;
    let mut report = estimate_risk_gap_unchecked(model, clean, sigma, num_pixel_draws, seed)?;
    report.certified = true;
    Ok(report)
}

/// [`verify_risk_gap`] without certification, for negative controls.
pub fn estimate_risk_gap_unchecked(
    model: &StbnModel,
    clean: &VideoSequence,
    sigma: f64,
    num_pixel_draws: usize,
    seed: u64,
) -> Result<RiskGapReport> {
    risk_gap_with(|noisy| model.blind_prediction(noisy), clean, sigma, num_pixel_draws, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StbnConfig;
    use crate::videodata::TranslatingTexture;

    fn zeros(frames: usize, side: usize) -> VideoSequence {
        VideoSequence::new(frames, side, side, 1, alloc::vec![0.0; frames * side * side]).unwrap()
    }

    #[test]
    fn zero_predictor_on_black_clip_gaps_by_sigma_squared() {
        let clean = zeros(2, 32);
        let r = risk_gap_with(
            |y| Ok(y.frame_tensors().iter().map(|f| Tensor::zeros(f.shape())).collect()),
            &clean,
            25.0,
            100_000,
            3,
        )
        .unwrap();
        assert_eq!(r.supervised_risk, 0.0);
        assert_eq!(r.noise_realisations, 49);
        // E[n^2] estimated from ~1e5 samples: relative sd sqrt(2 / N) ~ 0.45%
        assert!(r.relative_error < 0.02, "{r:?}");
    }

    #[test]
    fn copying_predictor_closes_the_gap() {
        let clean = TranslatingTexture::new(16, 16, 1, (0.0, 0.0), 3, 1).render(2).unwrap();
        let r = risk_gap_with(|y| Ok(y.frame_tensors()), &clean, 25.0, 10_000, 0).unwrap();
        assert_eq!(r.self_supervised_risk, 0.0);
        assert!((r.gap_estimate + r.expected_constant).abs() / r.expected_constant < 0.05);
    }

    #[test]
    fn open_centre_model_is_refused() {
        let mut c = StbnConfig::desk().with_channels(1);
        c.blindspot.channels = 4;
        c.srfe.channels = 4;
        c.blindspot.open_center = true;
        let m = StbnModel::new_unchecked(c, 0).unwrap();
        let clean = TranslatingTexture::new(16, 16, 1, (0.0, 0.0), 3, 1).render(3).unwrap();
        assert!(matches!(
            verify_risk_gap(&m, &clean, 25.0, 1000, 0),
            Err(Error::BlindSpotViolation(_))
        ));
        assert!(!estimate_risk_gap_unchecked(&m, &clean, 25.0, 1000, 0).unwrap().certified);
    }
}
