use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserArch, DenoiserCache, DenoiserNet};
use super::layers::{silu, silu_backward, Conv};
use super::params::ParamLayout;
use super::tensor::Tensor;
use super::Network;
use crate::error::{Error, Result};

/// Shallow two-layer conv stack with a learnable identity skip:
/// `B(x) = gain * x + conv2(silu(conv1(x)))`.
#[derive(Debug, Clone)]
pub struct BackboneNet {
    width: usize,
    layout: ParamLayout,
    params: Vec<f64>,
    conv1: Conv,
    conv2: Conv,
    gain: usize,
}

pub struct BackboneCache {
    input: Tensor,
    h: Tensor,
    s: Tensor,
}

impl BackboneNet {
    /// `conv2` always starts at zero; `init` picks the skip gain (1 or 0), so
    /// the initial map is the identity or exactly zero.
    pub fn new(width: usize, init: BackboneInit, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("backbone width must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let conv1 = Conv::new(&mut layout, "conv1", 1, width, [3, 3, 3]);
        let conv2 = Conv::new(&mut layout, "conv2", width, 1, [3, 3, 3]);
        let gain = layout.push("skip_gain", vec![1]);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        conv1.init(&mut params, &mut rng, 1.0);
        conv2.zero(&mut params);
        params[gain] = match init {
            BackboneInit::Identity => 1.0,
            BackboneInit::Zero => 0.0,
        };
        Ok(Self {
            width,
            layout,
            params,
            conv1,
            conv2,
            gain,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl Network for BackboneNet {
    type Cache = BackboneCache;

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn in_channels(&self) -> usize {
        1
    }

    fn forward_cached(&self, x: &Tensor, _t: f64) -> Result<(Tensor, BackboneCache)> {
        if x.c != 1 {
            return Err(Error::DimMismatch(format!("backbone expects 1 channel, got {}", x.c)));
        }
        let p = &self.params;
        let h = self.conv1.forward(p, x);
        let s = silu(&h);
        let mut y = self.conv2.forward(p, &s);
        let gain = p[self.gain];
        for (o, &v) in y.data.iter_mut().zip(&x.data) {
            *o += gain * v;
        }
        Ok((
            y,
            BackboneCache {
                input: x.clone(),
                h,
                s,
            },
        ))
    }

    fn backward(&self, c: &BackboneCache, gy: &Tensor, g: &mut [f64], need_input: bool) -> Option<Tensor> {
        let p = &self.params;
        g[self.gain] += gy.data.iter().zip(&c.input.data).map(|(a, b)| a * b).sum::<f64>();
        let gs = self.conv2.backward(p, &c.s, gy, g, true).unwrap();
        let gh = silu_backward(&c.h, &gs);
        let gx = self.conv1.backward(p, &c.input, &gh, g, need_input);
        gx.map(|mut gx| {
            let gain = p[self.gain];
            for (a, &b) in gx.data.iter_mut().zip(&gy.data) {
                *a += gain * b;
            }
            gx
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    #[default]
    Identity,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineArch {
    pub backbone_width: usize,
    pub backbone_init: BackboneInit,
    /// Encoder–decoder for the tissue projection branch (time conditioning unused).
    pub projector: DenoiserArch,
}

impl Default for RefineArch {
    fn default() -> Self {
        Self {
            backbone_width: 8,
            backbone_init: BackboneInit::Identity,
            projector: DenoiserArch {
                time_embed_dim: 0,
                ..DenoiserArch::default()
            },
        }
    }
}

/// The tissue refinement pair: backbone `B` over the generated volume and
/// projector `U` over the source volume.
#[derive(Debug, Clone)]
pub struct RefineNets {
    pub backbone: BackboneNet,
    pub projector: DenoiserNet,
}

pub struct RefineCache {
    pub backbone: BackboneCache,
    pub projector: DenoiserCache,
}

impl RefineNets {
    pub fn new(arch: &RefineArch, seed: u64) -> Result<Self> {
        if arch.projector.in_channels != 1 || arch.projector.out_channels != 1 {
            return Err(Error::Config("projector must map 1 channel to 1 channel".into()));
        }
        Ok(Self {
            backbone: BackboneNet::new(arch.backbone_width, arch.backbone_init, seed)?,
            projector: DenoiserNet::new(&arch.projector, seed.wrapping_add(1))?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params().len() + self.projector.params().len()
    }

    /// `B(gen) + U(source)`.
    pub fn forward_cached(&self, gen: &Tensor, source: &Tensor) -> Result<(Tensor, RefineCache)> {
        if gen.dims != source.dims {
            return Err(Error::DimMismatch(format!(
                "tissue branches need equal dims, got {:?} and {:?}",
                gen.dims, source.dims
            )));
        }
        let (mut b, bc) = self.backbone.forward_cached(gen, 0.0)?;
        let (u, uc) = self.projector.forward_cached(source, 0.0)?;
        b.add_assign(&u);
        Ok((
            b,
            RefineCache {
                backbone: bc,
                projector: uc,
            },
        ))
    }

    /// Gradients for the concatenated `[backbone, projector]` parameter vector.
    pub fn backward(&self, c: &RefineCache, gy: &Tensor, g: &mut [f64]) {
        let nb = self.backbone.params().len();
        let (gb, gu) = g.split_at_mut(nb);
        self.backbone.backward(&c.backbone, gy, gb, false);
        self.projector.backward(&c.projector, gy, gu, false);
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.backbone.params().to_vec();
        v.extend_from_slice(self.projector.params());
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let nb = self.backbone.params().len();
        self.backbone.params_mut().copy_from_slice(&flat[..nb]);
        self.projector.params_mut().copy_from_slice(&flat[nb..]);
    }
}
