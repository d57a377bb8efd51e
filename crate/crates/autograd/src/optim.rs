//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    /// One update of `params` along `grads`. Names absent from `grads` are left alone.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), ndarray::ArrayD::zeros(p.raw_dim()));
                self.v.insert(name.clone(), ndarray::ArrayD::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name).expect("moment");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m.get(name).expect("moment"), self.v.get(name).expect("moment"));
            if lr == 0.0 {
                continue;
            }
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Plain gradient descent step `p ← p − lr·g`.
pub fn sgd_update(params: &mut ParamStore, grads: &ParamStore, lr: f64) {
    for (name, p) in params.iter_mut() {
        if let Some(g) = grads.get(name) {
            p.scaled_add(-lr, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", arr1(v).into_dyn());
        s
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut opt = Adam::new(0.0);
        opt.update(&mut p, &store(&[0.5, 0.5]));
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_sign() {
        // Bias correction makes the first step exactly lr·sign(g) up to eps.
        let mut p = store(&[1.0, -2.0]);
        let mut opt = Adam::new(0.1);
        opt.update(&mut p, &store(&[3.0, -0.25]));
        let w: &ArrayD<f64> = p.get("w").unwrap();
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] + 1.9).abs() < 1e-6);
    }
}
