//! Named parameter storage, graph binding, and the adaptive-moment optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Gradients, Graph, Mat, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter of one store, indexed by `ParamId`.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn(shape, || dist.sample(rng));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Inserts every parameter as a leaf. Frozen parameters, or all of them
    /// when `trainable` is false, become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && !p.frozen {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Zero-initialized gradient accumulator shaped like this store.
    pub fn zero_grads(&self) -> Vec<Mat> {
        self.params.iter().map(|p| Array2::zeros(p.value.dim())).collect()
    }

    pub fn accumulate(&self, bound: &Bound, grads: &Gradients, into: &mut [Mat]) {
        for (i, acc) in into.iter_mut().enumerate() {
            if let Some(g) = grads.get(bound.vars[i]) {
                *acc += g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weight is `input x output`, drawn with std `1/sqrt(input)`; bias zero.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            (input, output),
            1.0 / (input as f64).sqrt(),
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let y = g.matmul(x, bound.var(self.weight));
        g.add_row(y, bound.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, dim)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, dim)));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.layer_norm(x, bound.var(self.gain), bound.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            first: store.zero_grads(),
            second: store.zero_grads(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let g = &grads[i] + &(&p.value * c.weight_decay);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= c.learning_rate * mh / (vh.sqrt() + c.eps);
                });
        }
    }
}
