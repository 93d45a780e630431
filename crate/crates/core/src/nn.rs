//! Small numeric building blocks shared by the trainable modules.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn fan_in_uniform_vec<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Trainable,
    /// State that is saved but not optimized (running statistics, fixed fills).
    Buffer,
}

pub struct TensorRef<'a> {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub role: Role,
    pub data: &'a mut [f64],
}

/// Named access to every tensor of a parameter set, in a fixed order.
///
/// Gradient containers reuse the parameter types, so the same visitor
/// lines up parameters with their gradients.
pub trait Params {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.role == Role::Trainable)
            .map(|t| t.data.len())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn t1<'a>(name: String, role: Role, a: &'a Array1<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        role,
        shape: vec![a.len()],
        data: a.as_slice().expect("contiguous"),
    }
}

pub(crate) fn t2<'a>(name: String, role: Role, a: &'a Array2<f64>) -> TensorRef<'a> {
    TensorRef {
        name,
        role,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("contiguous"),
    }
}

pub(crate) fn m1(name: String, role: Role, a: &mut Array1<f64>) -> TensorMut<'_> {
    TensorMut {
        name,
        role,
        data: a.as_slice_mut().expect("contiguous"),
    }
}

pub(crate) fn m2(name: String, role: Role, a: &mut Array2<f64>) -> TensorMut<'_> {
    TensorMut {
        name,
        role,
        data: a.as_slice_mut().expect("contiguous"),
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

impl Adam {
    pub fn update<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let grads: Vec<TensorRef<'_>> = grads
            .tensors()
            .into_iter()
            .filter(|t| t.role == Role::Trainable)
            .collect();
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let trainable = params
            .tensors_mut()
            .into_iter()
            .filter(|t| t.role == Role::Trainable);
        for (i, p) in trainable.enumerate() {
            let g = grads[i].data;
            debug_assert_eq!(p.name, grads[i].name);
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Zeroes every tensor in place.
pub fn zero<P: Params>(p: &mut P) {
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
}
