//! Self-supervised training.
//!
//! Every step samples one crop per clip, estimates flows on the noisy crop,
//! runs both propagation directions and SRFE, and fits the output against the
//! noisy frames themselves. The flow network is trained on its own schedule:
//! photometric warm-up first, then (with `flow_refine`) distillation towards a
//! frozen teacher applied to the denoised crop.

mod ablation;
pub mod loss;
mod risk;

pub use ablation::{run_ablation, AblationEntry, AblationRow, AblationSettings, AblationTable};
pub use risk::{estimate_risk_gap_unchecked, risk_gap_with, verify_risk_gap, RiskGapReport};

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    distillation_loss_graph, make_teacher_flows, photometric_loss, ClassicalLk, ClipFlows, DistillationConfig, FlowEstimator,
    TeacherSource,
};
use crate::graph::{Graph, Var};
use crate::metrics;
use crate::model::StbnModel;
use crate::nn::{Adam, Params};
use crate::srfe::Head;
use crate::tensor::Tensor;
use crate::videodata::{crop_training_batch, NoiseKind, NoiseModel, VideoSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    NllGaussian,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    /// Adam step size of the flow network (warm-up and distillation).
    pub flow_learning_rate: f64,
    pub crop_size: usize,
    pub seq_length: usize,
    /// Crops per step, taken round-robin over the training clips.
    pub batch_size: usize,
    pub iterations: usize,
    /// Fraction of the run, at the end, over which both step sizes fall
    /// linearly to zero. 0 keeps them constant.
    pub decay_fraction: f64,
    pub distill: DistillationConfig,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::NllGaussian,
            learning_rate: 1e-4,
            flow_learning_rate: 1e-4,
            crop_size: 96,
            seq_length: 10,
            batch_size: 4,
            iterations: 2000,
            decay_fraction: 0.0,
            distill: DistillationConfig::default(),
            seed: 0,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    /// Short CPU runs: 5-frame 32 px crops, one crop per step and a larger step
    /// size so a few hundred iterations make visible progress.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            flow_learning_rate: 1e-3,
            crop_size: 32,
            seq_length: 5,
            batch_size: 1,
            iterations: 500,
            decay_fraction: 0.3,
            distill: DistillationConfig {
                warmup_iterations: 250,
                ..Default::default()
            },
            log_interval: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.flow_learning_rate > 0.0 && self.flow_learning_rate.is_finite()) {
            return Err(Error::Config("flow_learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(Error::Config("decay_fraction must lie in [0, 1]".into()));
        }
        if self.crop_size < 8 || self.seq_length == 0 || self.batch_size == 0 {
            return Err(Error::Config("crop_size >= 8, seq_length >= 1 and batch_size >= 1 required".into()));
        }
        self.distill.validate()
    }
}

/// What the flow network did on a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPhase {
    /// No trainable flow in use.
    Idle,
    Warmup,
    /// Warm-up over and distillation disabled: flow weights stay fixed.
    Frozen,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iteration: usize,
    pub loss: f64,
    /// Photometric or `alpha`-weighted distillation loss of the flow network.
    pub flow_loss: Option<f64>,
    pub flow_phase: FlowPhase,
}

impl StepStats {
    pub fn alpha_active(&self) -> bool {
        self.flow_phase == FlowPhase::Distill
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub psnr_probe: Option<f64>,
    pub alpha_active: bool,
}

/// Held-out clip with its clean reference, for progress reporting only.
#[derive(Clone, Debug)]
pub struct ProbeClip {
    pub noisy: VideoSequence,
    pub clean: VideoSequence,
}

impl ProbeClip {
    /// Mean per-frame PSNR of the clipped denoised output.
    pub fn psnr(&self, model: &StbnModel, noise: &NoiseModel) -> Result<f64> {
        let out = model.denoise(&self.noisy, noise)?.clipped();
        Ok(metrics::evaluate(&out, &self.clean)?.mean_psnr)
    }

    pub fn noisy_psnr(&self) -> Result<f64> {
        Ok(metrics::evaluate(&self.noisy, &self.clean)?.mean_psnr)
    }
}

pub struct Trainer {
    model: StbnModel,
    config: TrainConfig,
    noise: NoiseModel,
    data: Vec<VideoSequence>,
    opt: Adam,
    flow_opt: Option<Adam>,
    teacher: Option<Box<dyn FlowEstimator>>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    /// `data` holds the noisy training clips; clean frames are never needed.
    pub fn new(model: StbnModel, data: Vec<VideoSequence>, noise: NoiseModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        noise.validate()?;
        if data.is_empty() {
            return Err(Error::Input("no training clips".into()));
        }
        if config.loss == LossKind::NllGaussian {
            if noise.kind != NoiseKind::GaussianKnownSigma {
                return Err(Error::Config("nll_gaussian loss needs a known noise sigma".into()));
            }
            if model.head() != Head::GaussianParams {
                return Err(Error::Config("nll_gaussian loss needs the gaussian_params head".into()));
            }
        }
        for clip in &data {
            if clip.channels() != model.image_channels() {
                return Err(Error::Input(alloc::format!(
                    "clip '{}' has {} channels, model expects {}",
                    clip.id,
                    clip.channels(),
                    model.image_channels()
                )));
            }
            if clip.frames() < config.seq_length || clip.height().min(clip.width()) < config.crop_size {
                return Err(Error::Input(alloc::format!(
                    "clip '{}' {:?} is smaller than the {}x{}x{} crop",
                    clip.id,
                    clip.dims(),
                    config.seq_length,
                    config.crop_size,
                    config.crop_size
                )));
            }
        }
        let opt = Adam::new(&model.params, config.learning_rate);
        let flow_opt = model.flow_net().map(|net| Adam::new(&net.params, config.flow_learning_rate));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            config,
            noise,
            data,
            opt,
            flow_opt,
            teacher: None,
            rng,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &StbnModel {
        &self.model
    }

    pub fn into_model(self) -> StbnModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Step-size multiplier for the current iteration.
    fn schedule(&self) -> f64 {
        let tail = self.config.decay_fraction * self.config.iterations as f64;
        if tail <= 0.0 {
            return 1.0;
        }
        let left = self.config.iterations.saturating_sub(self.iteration) as f64;
        (left / tail).min(1.0)
    }

    fn flow_phase(&self) -> FlowPhase {
        if self.flow_opt.is_none() {
            FlowPhase::Idle
        } else if self.iteration < self.config.distill.warmup_iterations {
            FlowPhase::Warmup
        } else if self.model.config.components.flow_refine {
            FlowPhase::Distill
        } else {
            FlowPhase::Frozen
        }
    }

    fn sample_batch(&mut self) -> Result<Vec<VideoSequence>> {
        (0..self.config.batch_size)
            .map(|b| {
                let clip = &self.data[(self.iteration * self.config.batch_size + b) % self.data.len()];
                crop_training_batch(clip, self.config.seq_length, self.config.crop_size, self.rng.next_u64())
            })
            .collect()
    }

    /// One optimisation step of the denoiser and, on its schedule, the flow network.
    pub fn step(&mut self) -> Result<StepStats> {
        let it = self.iteration;
        let phase = self.flow_phase();
        let crops = self.sample_batch()?;
        let k = 1.0 / crops.len() as f64;
        let mut grads: Vec<Option<Tensor>> = alloc::vec![None; self.model.params.len()];
        let mut flow_grads: Vec<Option<Tensor>> = match self.model.flow_net() {
            Some(net) => alloc::vec![None; net.params.len()],
            None => Vec::new(),
        };
        let mut loss = 0.0;
        let mut flow_loss = 0.0;
        if phase == FlowPhase::Distill {
            self.refresh_teacher();
        }
        for crop in &crops {
            let frames = crop.frame_tensors();
            let flows = self.model.estimate_flows(&frames)?;
            let (l, g) = self.denoiser_loss(&frames, &flows)?;
            loss += k * l;
            accumulate(&mut grads, g, k);
            let fl = match phase {
                FlowPhase::Warmup => Some(self.warmup_loss(&frames)?),
                FlowPhase::Distill => Some(self.distill_loss(crop, &frames, &flows)?),
                FlowPhase::Idle | FlowPhase::Frozen => None,
            };
            if let Some((l, g)) = fl {
                flow_loss += k * l;
                accumulate(&mut flow_grads, g, k);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: alloc::format!("denoiser loss is {loss}"),
            });
        }
        if !flow_loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: alloc::format!("flow loss is {flow_loss}"),
            });
        }
        check_grads(&grads, it, "denoiser")?;
        let k = self.schedule();
        self.opt.lr = k * self.config.learning_rate;
        self.opt.step(&mut self.model.params, &grads);
        let trains_flow = matches!(phase, FlowPhase::Warmup | FlowPhase::Distill);
        if trains_flow {
            check_grads(&flow_grads, it, "flow")?;
            if let (Some(opt), Some(net)) = (self.flow_opt.as_mut(), self.model.flow_net_mut()) {
                opt.lr = k * self.config.flow_learning_rate;
                opt.step(&mut net.params, &flow_grads);
            }
        }
        self.iteration += 1;
        Ok(StepStats {
            iteration: it,
            loss,
            flow_loss: trains_flow.then_some(flow_loss),
            flow_phase: phase,
        })
    }

    /// Runs the remaining iterations, calling `observe` after every step.
    pub fn run(&mut self, mut observe: impl FnMut(&StepStats, &StbnModel) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let stats = self.step()?;
            observe(&stats, &self.model)?;
        }
        Ok(())
    }

    fn denoiser_loss(&self, frames: &[Tensor], flows: &ClipFlows) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let p = Params::trainable(&self.model.params);
        let outs = self.model.forward_graph(&mut g, p, &vars, flows)?;
        let mut total = g.constant(Tensor::scalar(0.0));
        for (&o, y) in outs.iter().zip(frames) {
            let l = match (self.config.loss, self.model.head()) {
                (LossKind::NllGaussian, _) => {
                    let (mu, lv) = self.model.split_gaussian(&mut g, o)?;
                    let s = self.noise.unit_sigma().expect("checked in Trainer::new");
                    g.gaussian_nll(mu, lv, y, s * s)?
                }
                (LossKind::L2, Head::GaussianParams) => {
                    let (mu, _) = self.model.split_gaussian(&mut g, o)?;
                    g.mse(mu, y)?
                }
                (LossKind::L2, Head::Regression) => g.mse(o, y)?,
            };
            total = g.add(total, l)?;
        }
        let total = g.scale(total, 1.0 / frames.len() as f64);
        let value = g.value(total).item();
        let grads = g.backward(total).params(&g, self.model.params.len());
        Ok((value, grads))
    }

    fn warmup_loss(&self, frames: &[Tensor]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let net = self.model.flow_net().expect("warm-up needs the trainable flow network");
        let mut g = Graph::new();
        let p = Params::trainable(&net.params);
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let mut total = g.constant(Tensor::scalar(0.0));
        let pairs = frames.len().saturating_sub(1);
        for t in 0..pairs {
            for (a, b) in [(vars[t + 1], vars[t]), (vars[t], vars[t + 1])] {
                let f = net.forward_graph(&mut g, p, a, b)?;
                let l = photometric_loss(&mut g, a, b, f, self.config.distill.warmup_smoothness)?;
                total = g.add(total, l)?;
            }
        }
        let total = g.scale(total, 1.0 / (2 * pairs.max(1)) as f64);
        let value = g.value(total).item();
        Ok((value, g.backward(total).params(&g, net.params.len())))
    }

    fn refresh_teacher(&mut self) {
        let d = &self.config.distill;
        let since = self.iteration - d.warmup_iterations;
        let stale = d.teacher_refresh_interval > 0 && since > 0 && since.is_multiple_of(d.teacher_refresh_interval);
        if self.teacher.is_some() && !stale {
            return;
        }
        self.teacher = Some(match d.teacher {
            TeacherSource::FrozenSnapshot => {
                Box::new(self.model.flow_net().expect("distillation needs the trainable flow network").frozen_snapshot())
            }
            TeacherSource::ClassicalLk => Box::new(ClassicalLk::from_config(&self.model.config.flow)),
        });
    }

    /// `alpha * (sum_t mean|student_t - teacher_t| + gamma |theta|^2)`, teacher
    /// flows computed by the frozen teacher on the current denoised crop.
    fn distill_loss(&self, crop: &VideoSequence, frames: &[Tensor], flows: &ClipFlows) -> Result<(f64, Vec<Option<Tensor>>)> {
        let net = self.model.flow_net().expect("distillation needs the trainable flow network");
        let teacher = self.teacher.as_deref().expect("teacher refreshed before use");
        let denoised = self.model.denoise_with_flows(crop, &self.noise, flows)?;
        let teacher_flows = make_teacher_flows(&denoised, teacher)?.as_list();
        let mut g = Graph::new();
        let p = Params::trainable(&net.params);
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let n = frames.len() - 1;
        let mut student = Vec::with_capacity(2 * n);
        // same order as TeacherFlows::as_list: all forward flows, then all backward
        for t in 0..n {
            student.push(net.forward_graph(&mut g, p, vars[t + 1], vars[t])?);
        }
        for t in 0..n {
            student.push(net.forward_graph(&mut g, p, vars[t], vars[t + 1])?);
        }
        let teacher_vars: Vec<Var> = teacher_flows.iter().map(|f| g.constant(f.to_tensor())).collect();
        let d = &self.config.distill;
        let l = distillation_loss_graph(&mut g, &student, &teacher_vars, Some((p, d.weight_decay_gamma)))?;
        let l = g.scale(l, d.alpha);
        let value = g.value(l).item();
        Ok((value, g.backward(l).params(&g, net.params.len())))
    }
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>, k: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(mut g) = g else { continue };
        g.scale_assign(k);
        match a {
            Some(a) => a.add_assign(&g),
            None => *a = Some(g),
        }
    }
}

fn check_grads(grads: &[Option<Tensor>], iteration: usize, what: &str) -> Result<()> {
    if grads.iter().flatten().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            detail: alloc::format!("non-finite {what} gradient"),
        })
    }
}

/// Trains a model to completion and returns it with the per-step statistics.
pub fn train(
    model: StbnModel,
    data: Vec<VideoSequence>,
    noise: NoiseModel,
    config: TrainConfig,
) -> Result<(StbnModel, Vec<StepStats>)> {
    let mut trainer = Trainer::new(model, data, noise, config)?;
    let mut history = Vec::new();
    trainer.run(|s, _| {
        history.push(s.clone());
        Ok(())
    })?;
    Ok((trainer.into_model(), history))
}
