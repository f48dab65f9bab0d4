use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must be in store order (see
    /// [`crate::Gradients::for_params`]).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(TensorError::InvalidShape {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let step_size = T::from_f64(self.learning_rate / (1.0 - self.beta1.powf(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powf(t)));
        let eps = T::from_f64(self.epsilon);

        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let param = store.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, m), v), &g) in param.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v * corr2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
