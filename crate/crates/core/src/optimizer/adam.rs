//! Adam with bias correction, for real and complex parameter vectors.
//! Complex entries are two independent real parameters.

use nalgebra::Vector3;
use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self { params, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Clear moments and step count.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    fn begin(&mut self) -> (f64, f64) {
        self.t += 1;
        let t = self.t as i32;
        (1.0 - self.params.beta1.powi(t), 1.0 - self.params.beta2.powi(t))
    }

    #[inline]
    fn update(&mut self, k: usize, g: f64, lr: f64, c1: f64, c2: f64) -> f64 {
        let AdamParams { beta1, beta2, eps } = self.params;
        self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
        self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
        lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let (c1, c2) = self.begin();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            *p -= self.update(k, *g, lr, c1, c2);
        }
    }

    /// Complex parameters; the state must have twice their length.
    pub fn step_complex(&mut self, params: &mut [Complex64], grads: &[Complex64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(2 * params.len(), self.m.len());
        let (c1, c2) = self.begin();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.re -= self.update(2 * k, g.re, lr, c1, c2);
            p.im -= self.update(2 * k + 1, g.im, lr, c1, c2);
        }
    }

    pub fn step3(&mut self, params: &mut Vector3<f64>, grads: &Vector3<f64>, lr: f64) {
        assert_eq!(self.m.len(), 3);
        let (c1, c2) = self.begin();
        for k in 0..3 {
            params[k] -= self.update(k, grads[k], lr, c1, c2);
        }
    }
}
