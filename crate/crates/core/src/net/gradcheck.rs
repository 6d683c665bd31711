//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::loss::{ensure_finite, l1_with_grad, mse_with_grad};
use super::tensor::Tensor;
use super::Network;
use crate::error::{Error, Result};

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor so that gradients at roundoff level do not inflate the
/// relative error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        }
    }
}

/// A single regression loss between a network output and a fixed target.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    pub target: Tensor,
    pub t: f64,
}

/// Loss value and gradient with respect to every parameter of `net`.
pub fn loss_and_grad<N: Network>(net: &N, input: &Tensor, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let (y, cache) = net.forward_cached(input, spec.t)?;
    if y.dims != spec.target.dims || y.c != spec.target.c {
        return Err(Error::DimMismatch(format!(
            "output {:?}x{} vs target {:?}x{}",
            y.dims, y.c, spec.target.dims, spec.target.c
        )));
    }
    let (loss, gy) = match spec.kind {
        LossKind::L1 => l1_with_grad(&y.data, &spec.target.data, 1.0)?,
        LossKind::Mse => mse_with_grad(&y.data, &spec.target.data, 1.0)?,
    };
    ensure_finite(spec.kind.name(), loss)?;
    let gy = Tensor {
        dims: y.dims,
        c: y.c,
        data: gy,
    };
    let mut grads = vec![0.0; net.param_count()];
    net.backward(&cache, &gy, &mut grads, false);
    Ok((loss, grads))
}

/// Largest relative error `|a - n| / max(|a|, |n|, floor)` between `analytic`
/// and central differences of `f` over `probes` randomly chosen coordinates.
pub fn finite_difference_check<F>(
    params: &[f64],
    analytic: &[f64],
    probes: usize,
    seed: u64,
    step: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::DimMismatch(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let n = params.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        index::sample(&mut rng, n, probes).into_vec()
    };
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in picks {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p)?;
        p[i] = orig - step;
        let down = f(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks `loss_and_grad` for `net` against central differences with step
/// [`GRAD_CHECK_STEP`].
pub fn grad_check<N: Network>(net: &N, input: &Tensor, spec: &LossSpec, probes: usize) -> Result<f64> {
    grad_check_with_step(net, input, spec, probes, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step<N: Network>(
    net: &N,
    input: &Tensor,
    spec: &LossSpec,
    probes: usize,
    step: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_grad(net, input, spec)?;
    let mut probe_net = net.clone();
    finite_difference_check(net.params(), &analytic, probes, 0x6C0C, step, |p| {
        probe_net.params_mut().copy_from_slice(p);
        Ok(loss_and_grad(&probe_net, input, spec)?.0)
    })
}
