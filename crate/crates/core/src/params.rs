//! Named parameter tensors and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named 2-D parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<A> {
    names: Vec<String>,
    values: Vec<Array2<A>>,
}

impl<A> Default for ParamStore<A> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<A: Scalar> ParamStore<A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<A>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut R) -> ParamId {
        let v = Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(rng);
            A::lit(z * std)
        });
        self.add(name, v)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Array2::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<A> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<A> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<A>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Sum per-sample parameter gradients in order (deterministic accumulation).
pub fn accumulate<A: Scalar>(total: &mut Vec<Option<Array2<A>>>, grads: Vec<Option<Array2<A>>>) {
    if total.is_empty() {
        *total = grads;
        return;
    }
    for (slot, g) in total.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(t), Some(g)) => *t += &g,
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<A> {
    pub config: AdamConfig,
    m: Vec<Array2<A>>,
    v: Vec<Array2<A>>,
    step: u64,
}

impl<A: Scalar> Adam<A> {
    pub fn new(config: AdamConfig, params: &ParamStore<A>) -> Self {
        let m = params.values.iter().map(|p| Array2::zeros(p.dim())).collect::<Vec<_>>();
        Self { config, v: m.clone(), m, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<A>, grads: &[Option<Array2<A>>], lr_scale: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let lr = A::lit(self.config.lr * lr_scale * bc2.sqrt() / bc1);
        let (b1, b2) = (A::lit(self.config.beta1), A::lit(self.config.beta2));
        let eps = A::lit(self.config.eps);
        let clip = A::lit(clip);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = b1 * *m + (A::one() - b1) * g;
                *v = b2 * *v + (A::one() - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            });
        }
        norm
    }
}
