//! Noise schedule and the diffusion kernels: forward noising, closed-form
//! marginals, and the reverse (denoising) update.
//!
//! Steps are 1-based: `t = 1..=T`. Index 0 of every array is unused so the
//! code reads like the recurrences; `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3;

/// How the reverse-step noise scale is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// sigma_t = sqrt(beta_t)
    #[default]
    SqrtBeta,
    /// sigma_t = sqrt(beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)), the posterior variance
    Posterior,
}

/// Serialized schedule parameters (as stored in run manifests).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_rule: SigmaRule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            sigma_rule: SigmaRule::SqrtBeta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule_with(self.steps, self.beta_start, self.beta_end, self.sigma_rule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
    sigma: Vec<f64>,
    config: ScheduleConfig,
}

/// Linear beta schedule with `sigma_t = sqrt(beta_t)`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    build_schedule_with(steps, beta_start, beta_end, SigmaRule::SqrtBeta)
}

pub fn build_schedule_with(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_rule: SigmaRule,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut beta = vec![0.0; steps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let gamma: Vec<f64> = alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();
    let sigma = (0..=steps)
        .map(|t| match (t, sigma_rule) {
            (0, _) => 0.0,
            (_, SigmaRule::SqrtBeta) => beta[t].sqrt(),
            (_, SigmaRule::Posterior) => {
                (beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt()
            }
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        gamma,
        sigma,
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            sigma_rule,
        },
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// sqrt(1 - alpha_bar_t)
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// One forward Markov step: `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(
    x_prev: &Volume3,
    t: usize,
    eps: &Volume3,
    sched: &NoiseSchedule,
) -> Result<Volume3> {
    sched.check_step(t)?;
    let a = (1.0 - sched.beta(t)).sqrt();
    let b = sched.beta(t).sqrt();
    x_prev.zip_map(eps, |x, e| a * x + b * e)
}

/// Closed-form marginal: `sqrt(alpha_bar_t) x0 + gamma_t eps`.
pub fn forward_marginal(
    x0: &Volume3,
    t: usize,
    eps: &Volume3,
    sched: &NoiseSchedule,
) -> Result<Volume3> {
    sched.check_step(t)?;
    let a = sched.alpha_bar(t).sqrt();
    let g = sched.gamma(t);
    x0.zip_map(eps, |x, e| a * x + g * e)
}

/// Reverse update
/// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step(
    x_cur: &Volume3,
    eps_hat: &Volume3,
    t: usize,
    z: &Volume3,
    sched: &NoiseSchedule,
) -> Result<Volume3> {
    sched.check_step(t)?;
    x_cur.ensure_same_dims(eps_hat, "reverse_step eps_hat")?;
    x_cur.ensure_same_dims(z, "reverse_step z")?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = (1.0 - sched.alpha(t)) / sched.gamma(t);
    let sigma = sched.sigma(t);
    let data = x_cur
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv_sqrt_alpha * (x - coef * e) + sigma * n)
        .collect();
    Volume3::new(x_cur.dims(), x_cur.spacing(), data)
}
