//! Blind-spot training losses and posterior inference.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for the predicted log-variance.
pub const LOG_VAR_MIN: f64 = -10.0;
/// Upper clamp for the predicted log-variance.
pub const LOG_VAR_MAX: f64 = 4.0;

/// Per-pixel Gaussian belief about the clean signal.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianPrediction {
    /// Builds a prediction, clamping `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::Shape(alloc::format!(
                "mu {:?} vs log_var {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        if !mu.is_finite() || log_var.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("gaussian prediction".into()));
        }
        let log_var = log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        Ok(Self { mu, log_var })
    }
}

pub(crate) fn gaussian_nll_value(mu: &[f64], log_var: &[f64], y: &[f64], noise_var: f64) -> f64 {
    let n = mu.len() as f64;
    mu.iter()
        .zip(log_var)
        .zip(y)
        .map(|((m, lv), y)| {
            let s2 = libm::exp(*lv) + noise_var;
            let r = y - m;
            0.5 * (r * r / s2 + libm::log(s2))
        })
        .sum::<f64>()
        / n
}

pub(crate) fn gaussian_nll_grad(mu: &[f64], log_var: &[f64], y: &[f64], noise_var: f64) -> (Vec<f64>, Vec<f64>) {
    let n = mu.len() as f64;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for ((m, lv), y) in mu.iter().zip(log_var).zip(y) {
        let e = libm::exp(*lv);
        let s2 = e + noise_var;
        let r = y - m;
        dmu.push(-r / s2 / n);
        dlv.push(0.5 * (1.0 / s2 - r * r / (s2 * s2)) * e / n);
    }
    (dmu, dlv)
}

/// Mean negative log-likelihood of the noisy pixels `y` under
/// `N(mu, exp(log_var) + sigma^2)`, dropping the `log(2 pi)` constant.
pub fn nll_loss(pred: &GaussianPrediction, y: &Tensor, sigma: f64) -> Result<f64> {
    if pred.mu.shape() != y.shape() {
        return Err(Error::Shape(alloc::format!(
            "prediction {:?} vs target {:?}",
            pred.mu.shape(),
            y.shape()
        )));
    }
    if !pred.mu.is_finite() || !pred.log_var.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(gaussian_nll_value(
        pred.mu.data(),
        pred.log_var.data(),
        y.data(),
        sigma * sigma,
    ))
}

/// Conjugate-Gaussian posterior mean of the clean pixel given the noisy
/// observation `y` and the network's prior `N(mu, exp(log_var))`.
pub fn posterior_mean(pred: &GaussianPrediction, y: &Tensor, sigma: Option<f64>) -> Result<Tensor> {
    let sigma = sigma.ok_or_else(|| Error::Config("posterior inference needs a known noise sigma".into()))?;
    if pred.mu.shape() != y.shape() {
        return Err(Error::Shape("posterior_mean shape mismatch".into()));
    }
    let s2 = sigma * sigma;
    let data = pred
        .mu
        .data()
        .iter()
        .zip(pred.log_var.data())
        .zip(y.data())
        .map(|((m, lv), y)| posterior_pixel(*m, libm::exp(*lv), *y, s2))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

#[inline]
pub(crate) fn posterior_pixel(mu: f64, prior_var: f64, y: f64, noise_var: f64) -> f64 {
    let w = prior_var / (prior_var + noise_var);
    w * y + (1.0 - w) * mu
}

/// Mean squared error between blind-spot predictions and the noisy pixels.
pub fn l2_blind_loss(pred: &Tensor, noisy_target: &Tensor) -> Result<f64> {
    if pred.shape() != noisy_target.shape() {
        return Err(Error::Shape(alloc::format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            noisy_target.shape()
        )));
    }
    Ok(pred
        .data()
        .iter()
        .zip(noisy_target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec([1, 1, 1, n], v).unwrap()
    }

    #[test]
    fn nll_closed_form_point() {
        // mu = 0, y = 0, exp(log_var) = sigma^2 = 1 -> 0.5 ln 2
        let pred = GaussianPrediction::new(t(vec![0.0]), t(vec![0.0])).unwrap();
        let v = nll_loss(&pred, &t(vec![0.0]), 1.0).unwrap();
        assert!((v - 0.5 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn nll_certain_prediction_floor() {
        let sigma = 0.1;
        let pred = GaussianPrediction::new(t(vec![0.3, 0.7]), t(vec![-1e9, -50.0])).unwrap();
        assert_eq!(pred.log_var.data(), &[LOG_VAR_MIN, LOG_VAR_MIN]);
        let v = nll_loss(&pred, &t(vec![0.3, 0.7]), sigma).unwrap();
        let floor = 0.5 * libm::log(sigma * sigma);
        assert!(v >= floor);
        assert!((v - floor).abs() < 0.5 * libm::exp(LOG_VAR_MIN) / (sigma * sigma) + 1e-12);
    }

    #[test]
    fn nll_rejects_non_finite() {
        let pred = GaussianPrediction {
            mu: t(vec![f64::NAN]),
            log_var: t(vec![0.0]),
        };
        assert!(nll_loss(&pred, &t(vec![0.0]), 1.0).is_err());
    }

    #[test]
    fn posterior_limits() {
        let y = t(vec![0.9]);
        let mu = t(vec![0.1]);
        let certain = GaussianPrediction::new(mu.clone(), t(vec![LOG_VAR_MIN])).unwrap();
        let sigma = 1.0;
        let out = posterior_mean(&certain, &y, Some(sigma)).unwrap().item();
        assert!((out - 0.1).abs() < 1e-4);
        let equal = GaussianPrediction::new(mu.clone(), t(vec![0.0])).unwrap();
        let out = posterior_mean(&equal, &y, Some(1.0)).unwrap().item();
        assert!((out - 0.5).abs() < 1e-12);
        assert!(posterior_mean(&equal, &y, None).is_err());
    }

    #[test]
    fn l2_simple_cases() {
        let a = t(vec![0.1, 0.2, 0.3]);
        assert_eq!(l2_blind_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((l2_blind_loss(&b, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(l2_blind_loss(&a, &t(vec![0.0])).is_err());
    }
}
