//! SGD with momentum and Adam over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::propagation::{Bound, ParamStore};
use crate::tensor::{Gradients, Tensor};

/// Per-parameter gradients in store order (zeros when a parameter was not
/// reached by the backward pass).
pub fn collect_gradients(grads: &Gradients, bound: &Bound, params: &ParamStore) -> Vec<Vec<f64>> {
    bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_slice(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn check_layout(params: &ParamStore, grads: &[Vec<f64>]) -> Result<()> {
    if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, t)| g.len() != t.len()) {
        return Err(Error::contract("gradient layout does not match the parameter store"));
    }
    Ok(())
}

fn zeros_like(params: &ParamStore) -> Vec<Vec<f64>> {
    params.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
}

fn save_state(extra: &mut ParamStore, prefix: &str, params: &ParamStore, state: &[Vec<f64>]) -> Result<()> {
    for ((name, t), s) in params.iter().zip(state) {
        extra.insert(format!("{prefix}/{name}"), Tensor::new(t.shape().to_vec(), s.clone())?)?;
    }
    Ok(())
}

fn load_state(extra: &ParamStore, prefix: &str, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    params
        .iter()
        .map(|(name, t)| {
            let key = format!("{prefix}/{name}");
            let s = extra
                .get(&key)
                .ok_or_else(|| Error::NotFound(format!("optimizer state `{key}`")))?;
            if s.shape() != t.shape() {
                return Err(Error::shape("optimizer state", s.shape(), t.shape()));
            }
            Ok(s.data().to_vec())
        })
        .collect()
}

/// `v ← μ·v + g; θ ← θ − lr·v`
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, params: &ParamStore) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        check_layout(params, grads)?;
        for ((t, g), vel) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in t.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }

    pub fn save(&self, extra: &mut ParamStore, params: &ParamStore) -> Result<()> {
        save_state(extra, "sgd.velocity", params, &self.velocity)
    }

    pub fn load(lr: f64, momentum: f64, extra: &ParamStore, params: &ParamStore) -> Result<Self> {
        Ok(Sgd {
            lr,
            momentum,
            velocity: load_state(extra, "sgd.velocity", params)?,
        })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        check_layout(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((t, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, extra: &mut ParamStore, params: &ParamStore) -> Result<()> {
        save_state(extra, "adam.m", params, &self.m)?;
        save_state(extra, "adam.v", params, &self.v)?;
        extra.insert("adam.t", Tensor::scalar(self.t as f64))?;
        Ok(())
    }

    pub fn load(lr: f64, extra: &ParamStore, params: &ParamStore) -> Result<Self> {
        let t = extra
            .get("adam.t")
            .ok_or_else(|| Error::NotFound("optimizer state `adam.t`".into()))?
            .data()[0] as u64;
        Ok(Adam {
            t,
            m: load_state(extra, "adam.m", params)?,
            v: load_state(extra, "adam.v", params)?,
            ..Adam::new(lr, params)
        })
    }
}
