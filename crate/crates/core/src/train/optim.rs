//! Adaptive-moment optimizer.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const ADAM_EPS: f32 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied.
    pub t: u64,
}

impl Adam {
    pub fn for_params<'a>(params: impl Iterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One bias-corrected update, in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32, beta1: f32, beta2: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = (1.0 - (beta1 as f64).powi(self.t as i32)) as f32;
        let bc2 = (1.0 - (beta2 as f64).powi(self.t as i32)) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(format!("gradient {i} shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
