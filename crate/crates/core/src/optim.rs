//! AdamW with decoupled weight decay, global-norm clipping and a cosine
//! annealed learning rate.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tape::Mat;

/// `lr_min + ½(lr_0 - lr_min)(1 + cos(π t / T))`
pub fn cosine_lr(lr0: f64, lr_min: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.ids().map(|id| Mat::zeros(store.get(id).raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. Parameters absent from `grads` still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Mat>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if self.weight_decay > 0.0 {
                p.mapv_inplace(|v| v * (1.0 - lr * self.weight_decay));
            }
            let Some(g) = grads.get(&id) else { continue };
            let m = &mut self.first[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = &mut self.second[i];
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (&self.first[i], &self.second[i]);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<ParamId, Mat>, max_norm: f64) -> f64 {
    let mut keys: Vec<&ParamId> = grads.keys().collect();
    keys.sort();
    let norm = keys
        .iter()
        .map(|k| grads[*k].iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 20), 1e-3);
        assert!((cosine_lr(1e-3, 0.0, 10, 20) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 0.0, 20, 20).abs() < 1e-15);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Mat::from_elem((1, 2), 1.0));
        let mut opt = AdamW::new(&store, 0.0);
        let mut grads = HashMap::new();
        grads.insert(id, ndarray::array![[1.0, -1.0]]);
        opt.step(&mut store, &grads, 0.1);
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }
}
