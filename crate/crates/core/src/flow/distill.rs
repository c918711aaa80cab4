//! Pseudo-ground-truth flow distillation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ClipFlows, FlowEstimator};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ParamStore, Params};
use crate::videodata::VideoSequence;
use crate::warp::FlowField;

/// Which frozen estimator produces teacher flows on the denoised frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// Snapshot of the student taken when distillation switches on.
    #[default]
    FrozenSnapshot,
    ClassicalLk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationConfig {
    pub alpha: f64,
    pub warmup_iterations: usize,
    pub weight_decay_gamma: f64,
    pub teacher: TeacherSource,
    /// Steps between re-snapshots of the frozen teacher from the student.
    /// 0 keeps the snapshot taken when distillation switches on. Teacher flows
    /// themselves are recomputed on every step's denoised crop.
    pub teacher_refresh_interval: usize,
    /// Weight of the first-order smoothness term during photometric warm-up.
    pub warmup_smoothness: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-4,
            warmup_iterations: 1000,
            weight_decay_gamma: 4e-5,
            teacher: TeacherSource::FrozenSnapshot,
            teacher_refresh_interval: 0,
            warmup_smoothness: 0.05,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(alloc::format!("distillation alpha must be > 0, got {}", self.alpha)));
        }
        if self.weight_decay_gamma.is_nan() || self.weight_decay_gamma < 0.0 {
            return Err(Error::Config("weight_decay_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Teacher flows. Plain values: nothing computed from them can carry a
/// gradient back into whatever produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFlows {
    pub flows: ClipFlows,
}

impl TeacherFlows {
    /// Forward flows followed by backward flows, matching [`ClipFlows`] order.
    pub fn as_list(&self) -> Vec<FlowField> {
        self.flows.forward.iter().chain(&self.flows.backward).cloned().collect()
    }
}

/// Flows computed by a frozen estimator on denoised frames.
pub fn make_teacher_flows<E: FlowEstimator + ?Sized>(denoised: &VideoSequence, frozen_estimator: &E) -> Result<TeacherFlows> {
    if !frozen_estimator.is_frozen() {
        return Err(Error::Flow("teacher estimator must be frozen".into()));
    }
    Ok(TeacherFlows {
        flows: ClipFlows::estimate(frozen_estimator, &denoised.frame_tensors())?,
    })
}

/// `sum_t mean|student_t - stopgrad(teacher_t)| + gamma * sum(theta^2)`.
///
/// Teacher nodes are detached here, so callers may pass nodes that were
/// computed inside the same graph.
pub fn distillation_loss_graph(
    g: &mut Graph,
    student: &[Var],
    teacher: &[Var],
    student_params: Option<(Params<'_>, f64)>,
) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::Input(alloc::format!(
            "{} student flows vs {} teacher flows",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = g.constant(crate::tensor::Tensor::scalar(0.0));
    for (&s, &t) in student.iter().zip(teacher) {
        let t = g.detach(t);
        let l = g.l1(s, t)?;
        total = g.add(total, l)?;
    }
    if let Some((p, gamma)) = student_params {
        let decay = weight_sum_squares(g, p)?;
        let decay = g.scale(decay, gamma);
        total = g.add(total, decay)?;
    }
    Ok(total)
}

/// `sum(theta^2)` over every tensor of a store, as a graph node.
pub fn weight_sum_squares(g: &mut Graph, p: Params<'_>) -> Result<Var> {
    let mut total = g.constant(crate::tensor::Tensor::scalar(0.0));
    for i in 0..p.store.len() {
        let v = p.var(g, crate::nn::ParamId(i));
        let s = g.sum_squares(v);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Value of the distillation loss for fixed flows.
pub fn distillation_loss(student: &[FlowField], teacher: &[FlowField], student_params: &ParamStore, gamma: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Input(alloc::format!(
            "{} student flows vs {} teacher flows",
            student.len(),
            teacher.len()
        )));
    }
    let mut l1 = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.vectors().len() != t.vectors().len() {
            return Err(Error::Shape("student and teacher flow sizes differ".into()));
        }
        l1 += s.vectors().iter().zip(t.vectors()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.vectors().len() as f64;
    }
    Ok(l1 + gamma * student_params.sum_squares())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ClassicalLk, FlowEstimatorConfig, TinyPyramid};
    use crate::videodata::TranslatingTexture;

    fn store() -> ParamStore {
        TinyPyramid::new(&FlowEstimatorConfig::default(), 0).unwrap().params
    }

    #[test]
    fn identical_flows_leave_only_decay() {
        let p = store();
        let flows = alloc::vec![FlowField::uniform(8, 8, 1.0, -2.0); 4];
        let l = distillation_loss(&flows, &flows, &p, 4e-5).unwrap();
        assert!((l - 4e-5 * p.sum_squares()).abs() < 1e-15);
        assert!(l > 0.0);
    }

    #[test]
    fn unit_offset_gives_pair_count() {
        let p = ParamStore::new();
        let student: Vec<FlowField> = (0..4).map(|k| FlowField::uniform(8, 8, k as f64, 0.5)).collect();
        let teacher: Vec<FlowField> = (0..4).map(|k| FlowField::uniform(8, 8, k as f64 + 1.0, 1.5)).collect();
        assert!((distillation_loss(&student, &teacher, &p, 4e-5).unwrap() - 4.0).abs() < 1e-12);
        assert!(distillation_loss(&student[..3], &teacher, &p, 0.0).is_err());
    }

    #[test]
    fn graph_and_value_agree() {
        let net = TinyPyramid::new(&FlowEstimatorConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let s = g.constant(FlowField::uniform(8, 8, 0.3, 0.1).to_tensor());
        let t = g.constant(FlowField::uniform(8, 8, -0.2, 0.4).to_tensor());
        let l = distillation_loss_graph(&mut g, &[s], &[t], Some((Params::frozen(&net.params), 4e-5))).unwrap();
        let v = distillation_loss(
            &[FlowField::uniform(8, 8, 0.3, 0.1)],
            &[FlowField::uniform(8, 8, -0.2, 0.4)],
            &net.params,
            4e-5,
        )
        .unwrap();
        assert!((g.value(l).item() - v).abs() < 1e-12);
    }

    #[test]
    fn no_gradient_reaches_teacher_inputs() {
        let seq = TranslatingTexture::new(16, 16, 1, (1.0, 0.0), 3, 2).render(2).unwrap();
        let student = TinyPyramid::new(&FlowEstimatorConfig::default(), 5).unwrap();
        let teacher = student.frozen_snapshot();
        let mut g = Graph::new();
        let noisy_a = g.constant(seq.frame_tensor(1));
        let noisy_b = g.constant(seq.frame_tensor(0));
        // teacher inputs are differentiable leaves; they must receive nothing
        let den_a = g.input(seq.frame_tensor(1));
        let den_b = g.input(seq.frame_tensor(0));
        let sf = student
            .forward_graph(&mut g, Params::trainable(&student.params), noisy_a, noisy_b)
            .unwrap();
        let tf = teacher.forward_graph(&mut g, Params::frozen(&teacher.params), den_a, den_b).unwrap();
        let bump = g.constant(FlowField::uniform(16, 16, 0.7, 0.0).to_tensor());
        let tf = g.add(tf, bump).unwrap();
        let loss = distillation_loss_graph(&mut g, &[sf], &[tf], Some((Params::trainable(&student.params), 4e-5))).unwrap();
        let grads = g.backward(loss);
        for v in [den_a, den_b] {
            assert!(grads.get(v).is_none_or(|t| t.max_abs() == 0.0));
        }
        let pg = grads.params(&g, student.params.len());
        assert!(pg.iter().flatten().any(|t| t.max_abs() > 0.0));
    }

    #[test]
    fn teacher_must_be_frozen_and_is_deterministic() {
        let seq = TranslatingTexture::new(24, 24, 3, (2.0, 1.0), 3, 6).render(3).unwrap();
        let net = TinyPyramid::new(&FlowEstimatorConfig::default(), 1).unwrap();
        assert!(make_teacher_flows(&seq, &net).is_err());
        let frozen = net.frozen_snapshot();
        let a = make_teacher_flows(&seq, &frozen).unwrap();
        assert_eq!(a, make_teacher_flows(&seq, &frozen).unwrap());
        assert_eq!(a.as_list().len(), 4);
        // on the clean clip the teacher is exactly the clean-image flow
        let lk = ClassicalLk::default();
        let clean = ClipFlows::estimate(&lk, &seq.frame_tensors()).unwrap();
        assert_eq!(make_teacher_flows(&seq, &lk).unwrap().flows, clean);
    }
}
