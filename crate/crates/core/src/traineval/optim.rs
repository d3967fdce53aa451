use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Adam { cfg, step: 0, m: zeros(), v: zeros() })
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g.data()[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g.data()[i] * g.data()[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &ps).unwrap();
        let g = Tensor::from_rows(&[vec![3.0, -0.01, 0.0]]).unwrap();
        opt.step(&mut ps, &[g]);
        let x = ps.get(0).data();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - -1.9).abs() < 1e-4);
        assert_eq!(x[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor::from_rows(&[vec![5.0, -3.0]]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &ps).unwrap();
        for _ in 0..2000 {
            let g = ps.get(0).scale(2.0);
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get(0).data().iter().all(|v| v.abs() < 1e-3), "{:?}", ps.get(0));
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor::from_rows(&[vec![1.5, 2.5]]).unwrap());
        let before = ps.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &ps).unwrap();
        opt.step(&mut ps, &[Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap()]);
        assert_eq!(ps, before);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let ps = ParamStore::new();
        assert!(Adam::new(AdamConfig { lr: -1.0, ..AdamConfig::default() }, &ps).is_err());
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..AdamConfig::default() }, &ps).is_err());
    }
}
