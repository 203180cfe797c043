//! Adam with per-parameter state keyed by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Each parameter keeps its own step count, so parameters that sit out some
/// steps (frozen phases) get correct bias correction when they resume.
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of `param` in place with gradient `grad`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(())
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        adam.step("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(adam.steps_taken("p"), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        let mut p = Tensor::new(&[1], vec![3.0]).unwrap();
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            adam.step("p", &mut p, &g).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[1]);
        assert!(adam.step("p", &mut p, &Tensor::full(&[1], f64::NAN)).is_err());
    }
}
