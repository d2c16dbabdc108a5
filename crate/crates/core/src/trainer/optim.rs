use std::collections::BTreeMap;

use crate::error::{NtlError, Result};
use crate::netcore::{Grads, ParamSet, Real};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .params
                .get_mut(name)
                .ok_or_else(|| NtlError::ParamMismatch(format!("gradient for unknown parameter `{name}`")))?;
            if p.data.len() != g.data.len() {
                return Err(NtlError::ParamMismatch(format!("gradient size mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.data.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.data.len()]);
            for i in 0..g.data.len() {
                let gi = g.data[i].f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] = T::lit(p.data[i].f64() - update);
            }
        }
        params.step += 1;
        Ok(())
    }
}
