//! Adam with bias correction and optional global-norm clipping.

use crate::container::Container;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::regressor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 0.0 }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &AdamConfig) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients, {} moments for {} parameters", grads.len(), self.m.len(), store.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.values()[i].shape() {
                return Err(Error::shape("adam_step", format!("gradient shape of {}", store.names()[i])));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.names()[i])));
            }
        }
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        let scale = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((x, g), (mj, vj)) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g * scale;
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * g;
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * g * g;
                *x -= cfg.lr * (*mj / c1) / ((*vj / c2).sqrt() + cfg.eps);
            }
        }
        Ok(norm)
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str, store: &ParamStore) {
        c.put_i64(format!("{prefix}step"), vec![1], vec![self.step as i64]).unwrap();
        for (i, n) in store.names().iter().enumerate() {
            c.put_tensor(format!("{prefix}m/{n}"), &self.m[i]);
            c.put_tensor(format!("{prefix}v/{n}"), &self.v[i]);
        }
    }

    pub fn read_from(c: &Container, prefix: &str, store: &ParamStore) -> Result<Self> {
        let step = c.i64s(&format!("{prefix}step"))?.1;
        let step = *step.first().ok_or_else(|| Error::Format("empty optimizer step".into()))?;
        let mut state = AdamState::new(store);
        state.step = u64::try_from(step).map_err(|_| Error::Format("negative optimizer step".into()))?;
        for (i, n) in store.names().iter().enumerate() {
            for (moments, key) in [(&mut state.m, "m"), (&mut state.v, "v")] {
                let t = c.tensor(&format!("{prefix}{key}/{n}"))?;
                if t.shape() != moments[i].shape() {
                    return Err(Error::shape("load optimizer", format!("{key}/{n}")));
                }
                moments[i] = t;
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new([1, v.len()], v.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step ±lr regardless of gradient scale.
        let mut s = store(&[1.0, -2.0]);
        let mut a = AdamState::new(&s);
        let g = Tensor::new([1, 2], vec![5.0, -0.001]).unwrap();
        a.update(&mut s, &[g], &AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let d = s.values()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-4);
    }

    #[test]
    fn non_finite_leaves_params_untouched() {
        let mut s = store(&[1.0]);
        let before = s.clone();
        let mut a = AdamState::new(&s);
        let err = a.update(&mut s, &[Tensor::new([1, 1], vec![f64::NAN]).unwrap()], &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(m)) if m.contains('p')));
        assert_eq!(s, before);
        assert_eq!(a.step, 0);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut s = store(&[0.0, 0.0]);
        let mut a = AdamState::new(&s);
        let g = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        let cfg = AdamConfig { clip: 1.0, ..Default::default() };
        assert_eq!(a.update(&mut s, &[g], &cfg).unwrap(), 5.0);
        assert!((a.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
    }
}
