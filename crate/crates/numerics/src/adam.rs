use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update; gradients are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NumericsError::InvalidLearningRate(lr));
        }
        if self.first.len() != store.len() {
            return Err(NumericsError::OptimizerMismatch(format!(
                "{} moment tensors for {} parameters",
                self.first.len(),
                store.len()
            )));
        }
        for (i, (name, p)) in store.iter().enumerate() {
            if p.value.shape() != self.first[i].shape() {
                return Err(NumericsError::OptimizerMismatch(format!(
                    "`{name}` has shape {:?}, moments {:?}",
                    p.value.shape(),
                    self.first[i].shape()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for (i, (_, p)) in store.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = p.value.data_mut();
            for (((wj, gj), mj), vj) in w.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = flush(b1 * *mj + (1.0 - b1) * gj);
                *vj = flush(b2 * *vj + (1.0 - b2) * gj * gj);
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *wj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

/// Moments of parameters whose gradient stays zero (dead ReLU units) decay
/// geometrically into the subnormal range, where x86 arithmetic is two orders
/// of magnitude slower. Flush them to zero.
#[inline]
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}
