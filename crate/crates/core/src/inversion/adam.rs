use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one vector. The step count advances only when the
/// vector is actually updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Array1<f64>,
    v: Array1<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: Array1::zeros(dim),
            v: Array1::zeros(dim),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update to `x` in place.
    pub fn update(&mut self, x: &mut Array1<f64>, grad: &Array1<f64>, lr: f64, p: &AdamParams) {
        self.t += 1;
        self.m = &self.m * p.beta1 + grad * (1.0 - p.beta1);
        self.v = &self.v * p.beta2 + &grad.mapv(|g| g * g) * (1.0 - p.beta2);
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + p.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = AdamState::new(3);
        let mut x = Array1::from(vec![1.0, 1.0, 1.0]);
        s.update(&mut x, &Array1::from(vec![2.0, -0.5, 0.0]), 0.1, &AdamParams::default());
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - 1.1).abs() < 1e-6);
        assert_eq!(x[2], 1.0);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = Array1::from(vec![0.3, -0.2]);
        let mut x = Array1::zeros(2);
        let mut s = AdamState::new(2);
        for _ in 0..2000 {
            let g = (&x - &target) * 2.0;
            s.update(&mut x, &g, 0.01, &AdamParams::default());
        }
        assert!((&x - &target).iter().all(|d| d.abs() < 1e-3));
    }
}
