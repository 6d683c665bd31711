//! Small 3D convolutional networks with hand-written reverse-mode gradients.

mod checkpoint;
mod denoiser;
mod gradcheck;
pub mod loss;
pub mod layers;
mod optim;
mod params;
mod perception;
mod refine_nets;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use denoiser::{DenoiserArch, DenoiserCache, DenoiserNet};
pub use loss::{LossBreakdown, LossComponent};
pub use gradcheck::{finite_difference_check, grad_check, grad_check_with_step, loss_and_grad, LossKind, LossSpec, GRAD_CHECK_STEP};
pub use optim::{opt_step, AdamWConfig, OptimState};
pub use params::{ParamLayout, ParamSlice};
pub use perception::{PerceptionArch, PerceptionCache, PerceptionNet};
pub use refine_nets::{BackboneCache, BackboneInit, BackboneNet, RefineArch, RefineCache, RefineNets};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// A differentiable map from a multi-channel volume (plus a noise level) to a
/// multi-channel volume of the same spatial dims.
pub trait Network: Clone + Send + Sync {
    type Cache: Send;

    fn layout(&self) -> &ParamLayout;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn in_channels(&self) -> usize;

    fn forward_cached(&self, x: &Tensor, t: f64) -> Result<(Tensor, Self::Cache)>;

    /// Accumulates parameter gradients into `grads` given the output gradient
    /// `gy`, returning the input gradient when `need_input` is set.
    fn backward(&self, cache: &Self::Cache, gy: &Tensor, grads: &mut [f64], need_input: bool) -> Option<Tensor>;

    fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(self.forward_cached(x, t)?.0)
    }

    fn param_count(&self) -> usize {
        self.params().len()
    }
}

/// Sinusoidal embedding: `[sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})]`
/// with `w_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[i] = (t * w).sin();
        out[half + i] = (t * w).cos();
    }
    Ok(out)
}
