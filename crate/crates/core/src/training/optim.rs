//! Adam with optional global-norm clipping.

use xmodal_tensor::ParamStore;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// Applies one update from the gradients held in `store`, then zeroes
    /// them and rounds parameters to storage precision.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            for (_, t) in store.iter() {
                self.m.push(vec![0.0; t.len()]);
                self.v.push(vec![0.0; t.len()]);
            }
        }
        let mut norm2 = 0.0;
        for (name, t) in store.iter() {
            let g = t.grad().unwrap_or(&[]);
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    step: self.t + 1,
                    message: format!("gradient of `{name}` is {bad}"),
                });
            }
            norm2 += g.iter().map(|x| x * x).sum::<f64>();
        }
        let scale = match self.clip {
            Some(c) if norm2.sqrt() > c => c / norm2.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, t)) in store.iter_mut().enumerate() {
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        store.round_to_storage();
        Ok(())
    }
}
