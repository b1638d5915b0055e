use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::ParamStore;

/// Bias-corrected Adam. Moments are created lazily, so frozen parameters
/// never get any state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f32, beta2: f32, epsilon: f32) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }

    /// One update of every trainable parameter named in `grads`; gradients
    /// for frozen parameters are ignored.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)], lr: f32) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    name.clone(),
                    format!("{:?}", p.value.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
                .zip(g.data());
            for ((w, (m, v)), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::full(&[3], v), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(0.7);
        let mut adam = AdamState::default();
        for _ in 0..10 {
            adam.step(&mut s, &[("a.w".into(), Tensor::zeros(&[3]))], 1e-3).unwrap();
        }
        assert_eq!(s, store(0.7));
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut s = store(0.0);
        let mut adam = AdamState::default();
        let lr = 1e-3;
        let mut prev = 0.0f32;
        for _ in 0..1000 {
            adam.step(&mut s, &[("a.w".into(), Tensor::full(&[3], 0.37))], lr)
                .unwrap();
            let now = s.tensor("a.w").unwrap().data()[0];
            let step = (prev - now).abs();
            assert!((step - lr).abs() / lr < 0.01, "step {step}");
            prev = now;
        }
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = store(1.0);
        s.insert("b.w", Tensor::full(&[2], 1.0), false);
        let mut adam = AdamState::default();
        let grads = [("a.w".into(), Tensor::ones(&[3])), ("b.w".into(), Tensor::ones(&[2]))];
        adam.step(&mut s, &grads, 0.1).unwrap();
        assert_eq!(s.tensor("b.w").unwrap(), &Tensor::full(&[2], 1.0));
        assert!(!adam.has_state("b.w"));
        assert!(adam.has_state("a.w"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(1.0);
        let r = AdamState::default().step(&mut s, &[("a.w".into(), Tensor::ones(&[4]))], 0.1);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
