use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok && [self.lr, self.weight_decay, self.eps].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment accumulators for AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(n: usize, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

pub fn opt_step(params: &mut [f64], grads: &[f64], st: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.m.len() || st.v.len() != st.m.len() {
        return Err(Error::DimMismatch(format!(
            "optimizer shapes: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            st.m.len()
        )));
    }
    st.step += 1;
    let c = st.cfg;
    let bc1 = 1.0 - c.beta1.powi(st.step as i32);
    let bc2 = 1.0 - c.beta2.powi(st.step as i32);
    let decay = 1.0 - c.lr * c.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut st.m).zip(&mut st.v) {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}
