//! Adam without weight decay, constant per-group learning rates.
//!
//! Optimizer state exists only for trainable parameters; frozen groups have
//! no moment buffers and are never touched, so their bytes stay identical
//! across arbitrarily many steps.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub struct Adam<T: Scalar> {
    lr_by_group: BTreeMap<String, f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<usize, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr_by_group: BTreeMap<String, f64>) -> Self {
        Self {
            lr_by_group,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr_for_group(&self, group: &str) -> Option<f64> {
        self.lr_by_group.get(group).copied()
    }

    /// One update over all trainable parameters using accumulated grads.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in store.trainable_ids() {
            let group = store.group_of(id).to_string();
            let lr = match self.lr_by_group.get(&group) {
                Some(&lr) => lr,
                None => continue,
            };
            let ParamId(raw) = id;
            let shape = store.value(id).raw_dim();
            let (m, v) = self
                .moments
                .entry(raw)
                .or_insert_with(|| (ArrayD::zeros(shape.clone()), ArrayD::zeros(shape)));
            let g = store.grad(id).clone();
            let b1 = T::from_f(self.beta1);
            let b2 = T::from_f(self.beta2);
            let one = T::one();
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let lr_t = T::from_f(lr);
            let bc1t = T::from_f(bc1);
            let bc2t = T::from_f(bc2);
            let eps = T::from_f(self.eps);
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1t;
                    let vhat = vv / bc2t;
                    *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_moves_only_trainable_groups() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.register("a", "hot", arr1(&[1.0]).into_dyn());
        let b = ps.register("b", "cold", arr1(&[1.0]).into_dyn());
        ps.set_trainable_groups(&["hot".to_string()]).unwrap();
        ps.accumulate_grad(a, &arr1(&[0.5]).into_dyn());
        ps.accumulate_grad(b, &arr1(&[0.5]).into_dyn());
        let mut opt = Adam::new(BTreeMap::from([
            ("hot".to_string(), 1e-2),
            ("cold".to_string(), 1e-2),
        ]));
        opt.step(&mut ps);
        assert!(ps.value(a)[[0]] < 1.0);
        assert_eq!(ps.value(b)[[0]], 1.0);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // with bias correction the very first step is exactly lr·sign(g)
        let mut ps = ParamStore::<f64>::new();
        let a = ps.register("a", "g", arr1(&[0.0]).into_dyn());
        ps.accumulate_grad(a, &arr1(&[3.0]).into_dyn());
        let mut opt = Adam::new(BTreeMap::from([("g".to_string(), 0.1)]));
        opt.step(&mut ps);
        assert!((ps.value(a)[[0]] + 0.1).abs() < 1e-6);
    }
}
