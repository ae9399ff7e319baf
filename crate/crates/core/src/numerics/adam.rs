use super::params::ParamStore;
use super::tape::{GradBuf, Gradients};
use crate::error::{contract, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every trainable parameter. Parameters absent
    /// from `grads` see a zero gradient; their moments still decay.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, buf) in grads.iter() {
            let p = store.get(*id);
            let ok = match buf {
                GradBuf::Dense(d) => d.len() == p.data.len(),
                GradBuf::Rows(rows) => rows
                    .iter()
                    .all(|(&r, v)| r < p.rows() && v.len() == p.row_len()),
            };
            if !ok {
                return Err(contract(format!(
                    "gradient for `{}` does not match shape {:?}",
                    p.name, p.shape
                )));
            }
        }
        let mut dense = Vec::new();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            dense.clear();
            dense.resize(p.data.len(), 0.0);
            match grads.get(super::params::ParamId(i)) {
                None => {}
                Some(GradBuf::Dense(d)) => dense.copy_from_slice(d),
                Some(GradBuf::Rows(rows)) => {
                    let w = p.row_len();
                    for (&r, v) in rows {
                        dense[r * w..(r + 1) * w].copy_from_slice(v);
                    }
                }
            }
            for j in 0..p.data.len() {
                let g = dense[j];
                let m = self.beta1 * p.first_moment[j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.second_moment[j] + (1.0 - self.beta2) * g * g;
                p.first_moment[j] = m;
                p.second_moment[j] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`Adam::step`] with default hyperparameters.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    Adam::default().step(store, grads, lr)
}
