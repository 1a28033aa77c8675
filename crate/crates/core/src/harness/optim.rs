//! Adam over the trainable entries of a parameter store.

use std::collections::BTreeMap;

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update. Every trainable parameter must have a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Numeric(format!("no gradient for trainable parameter {name}")))?;
            let param = store.get_mut(&name).expect("listed above");
            if g.shape() != param.value.shape() {
                return Err(Error::shape(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, &gi), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap(), true).unwrap();
        store.insert("frozen", Tensor::from_vec(&[1], vec![5.0f32]).unwrap(), false).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(&[3], vec![0.5f32, -2.0, 0.0]).unwrap());
        let mut opt = Adam::new(0.1, 0.5, 0.999, 1e-8);
        opt.update(&mut store, &grads).unwrap();
        let a = store.get("a").unwrap().data();
        assert!((a[0] - 0.9).abs() < 1e-6 && (a[1] - 2.1).abs() < 1e-6 && a[2] == 3.0);
        assert_eq!(store.get("frozen").unwrap().data(), &[5.0]);
        assert_eq!(opt.step, 1);
        assert!(!opt.m.contains_key("frozen"));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::<f32>::zeros(&[1]), true).unwrap();
        let mut opt = Adam::new(0.1, 0.5, 0.999, 1e-8);
        assert!(opt.update(&mut store, &BTreeMap::new()).is_err());
    }
}
