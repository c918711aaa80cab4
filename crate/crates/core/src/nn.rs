//! Parameters, layers and the Adam optimizer.

use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum()
    }

    /// Overwrites every tensor from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Config(alloc::format!("unexpected parameter `{name}`")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Shape(alloc::format!(
                    "parameter `{name}`: stored {:?}, model {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
            seen += 1;
        }
        if seen != self.tensors.len() {
            return Err(Error::Config(alloc::format!(
                "parameter set incomplete: {seen} of {} tensors provided",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

/// Read access to a parameter store while building a graph.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub store: &'a ParamStore,
    /// When false, parameters enter the graph as constants.
    pub trainable: bool,
}

impl<'a> Params<'a> {
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, self.store.get(id), self.trainable)
    }
}

/// Deterministic initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: [usize; 4], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data).expect("sized")
    }
}

/// A tap-list convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Rc<ConvGeom>,
}

impl Conv2d {
    /// He-normal initialisation scaled by `gain`; `gain = 0` gives a zero-initialised layer.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        geom: ConvGeom,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        if geom.groups == 0 || !geom.in_channels.is_multiple_of(geom.groups) || !geom.out_channels.is_multiple_of(geom.groups) {
            return Err(Error::Config(alloc::format!(
                "{name}: channels {}->{} not divisible into {} groups",
                geom.in_channels,
                geom.out_channels,
                geom.groups
            )));
        }
        if geom.taps.is_empty() {
            return Err(Error::Config(alloc::format!("{name}: empty kernel")));
        }
        let fan = geom.fan_in();
        let std = gain * libm::sqrt(2.0 / fan as f64);
        let w = init.normal([geom.out_channels, fan, 1, 1], std);
        let weight = store.add(alloc::format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(alloc::format!("{name}.bias"), Tensor::zeros([1, geom.out_channels, 1, 1])));
        Ok(Self {
            weight,
            bias,
            geom: Rc::new(geom),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = self.bias.map(|b| p.var(g, b));
        g.conv(x, w, b, self.geom.clone())
    }

    /// Scales the slice of weights that reads input channels `[start, start + len)`.
    pub fn scale_input_channels(&self, store: &mut ParamStore, start: usize, len: usize, k: f64) {
        let taps = self.geom.taps.len();
        let cin_g = self.geom.in_per_group();
        let fan = self.geom.fan_in();
        let w = store.get_mut(self.weight);
        for o in 0..self.geom.out_channels {
            for ci in start..start + len {
                if ci >= cin_g {
                    continue;
                }
                for t in 0..taps {
                    w.data_mut()[o * fan + ci * taps + t] *= k;
                }
            }
        }
    }
}

/// Adam optimizer (Kingma & Ba), bias-corrected, no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.tensors[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Names of all parameters, for diagnostics.
pub fn param_names(store: &ParamStore) -> Vec<String> {
    store.iter().map(|(n, _)| n.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec([1, 1, 1, 2], alloc::vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = Params::trainable(&store).var(&mut g, id);
            let loss = g.sum_squares(x);
            let grads = g.backward(loss).params(&g, store.len());
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).max_abs() < 1e-3);
    }

    #[test]
    fn load_rejects_shape_mismatch_and_missing() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros([1, 1, 1, 2]));
        a.add("b", Tensor::zeros([1, 1, 1, 1]));
        let wrong = Tensor::zeros([1, 1, 1, 3]);
        assert!(a.load([("w", &wrong)]).is_err());
        let ok = Tensor::zeros([1, 1, 1, 2]);
        assert!(a.load([("w", &ok)]).is_err());
    }
}
