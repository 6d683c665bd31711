//! Elementwise regression losses with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimMismatch(format!(
            "loss operands have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sign` with `sign(0) = 0`, the L1 subgradient convention.
pub fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error.
pub fn l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute error and its gradient with respect to `pred`, scaled by `weight`.
pub fn l1_with_grad(pred: &[f64], target: &[f64], weight: f64) -> Result<(f64, Vec<f64>)> {
    let loss = l1(pred, target)?;
    let k = weight / pred.len() as f64;
    let g = pred.iter().zip(target).map(|(a, b)| k * l1_sign(a - b)).collect();
    Ok((loss, g))
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn mse_with_grad(pred: &[f64], target: &[f64], weight: f64) -> Result<(f64, Vec<f64>)> {
    let loss = mse(pred, target)?;
    let k = 2.0 * weight / pred.len() as f64;
    let g = pred.iter().zip(target).map(|(a, b)| k * (a - b)).collect();
    Ok((loss, g))
}

pub(crate) fn ensure_finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: term.to_string() })
    }
}

/// One named, weighted loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComponent {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Named loss components and their weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: Vec<LossComponent>,
    pub total: f64,
}

impl LossBreakdown {
    /// Appends a component; a non-finite value is an error naming the term.
    pub fn push(&mut self, name: &str, value: f64, weight: f64) -> Result<()> {
        ensure_finite(name, value)?;
        self.components.push(LossComponent {
            name: name.to_string(),
            value,
            weight,
        });
        self.total = self.weighted_sum();
        Ok(())
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.components.iter().map(|c| c.name.as_str()).collect()
    }

    /// Componentwise mean over a batch with identical component layouts.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = parts.first() else {
            return LossBreakdown::default();
        };
        let n = parts.len() as f64;
        let components = first
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| LossComponent {
                name: c.name.clone(),
                value: parts.iter().map(|p| p.components[i].value).sum::<f64>() / n,
                weight: c.weight,
            })
            .collect();
        let mut out = LossBreakdown { components, total: 0.0 };
        out.total = out.weighted_sum();
        out
    }
}
