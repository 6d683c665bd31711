//! Frozen random-weight feature extractor over stacked 2D planes.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool, avg_pool_backward, pool_factors, silu, silu_backward, Conv};
use super::params::ParamLayout;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptionArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 32],
            seed: 0x5EE,
        }
    }
}

/// Stages of `conv3x3 -> silu -> avg-pool 2x`; the feature vector concatenates
/// every stage's pooled output.
#[derive(Debug, Clone)]
pub struct PerceptionNet {
    arch: PerceptionArch,
    params: Vec<f64>,
    convs: Vec<Conv>,
}

pub struct PerceptionCache {
    stage_in: Vec<Tensor>,
    pre_act: Vec<Tensor>,
    factors: Vec<[usize; 3]>,
    out_dims: Vec<[usize; 3]>,
}

impl PerceptionNet {
    pub fn new(arch: &PerceptionArch) -> Result<Self> {
        if arch.widths.is_empty() || arch.widths.contains(&0) || arch.in_channels == 0 {
            return Err(Error::Config(format!(
                "invalid perception widths {:?}",
                arch.widths
            )));
        }
        let mut layout = ParamLayout::default();
        let mut prev = arch.in_channels;
        let convs: Vec<Conv> = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(&mut layout, &format!("stage{i}"), prev, w, [3, 3, 1]);
                prev = w;
                c
            })
            .collect();
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha20Rng::seed_from_u64(arch.seed);
        for c in &convs {
            c.init(&mut params, &mut rng, 1.0);
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            convs,
        })
    }

    pub fn arch(&self) -> &PerceptionArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Vec<f64>, PerceptionCache)> {
        if x.c != self.arch.in_channels || x.dims[2] != 1 {
            return Err(Error::DimMismatch(format!(
                "perception net expects {} planar channels, got {} channels with dims {:?}",
                self.arch.in_channels, x.c, x.dims
            )));
        }
        let mut feats = Vec::new();
        let mut cache = PerceptionCache {
            stage_in: Vec::new(),
            pre_act: Vec::new(),
            factors: Vec::new(),
            out_dims: Vec::new(),
        };
        let mut h = x.clone();
        for conv in &self.convs {
            let pre = conv.forward(&self.params, &h);
            let act = silu(&pre);
            let f = pool_factors(act.dims, [true, true, false]);
            let pooled = avg_pool(&act, f);
            feats.extend_from_slice(&pooled.data);
            cache.stage_in.push(h);
            cache.pre_act.push(pre);
            cache.factors.push(f);
            cache.out_dims.push(pooled.dims);
            h = pooled;
        }
        Ok((feats, cache))
    }

    /// Gradient with respect to the input planes; the weights stay frozen.
    pub fn input_gradient(&self, cache: &PerceptionCache, g_feats: &[f64]) -> Tensor {
        let mut scratch = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(self.convs.len());
        let mut acc = 0;
        for (d, conv) in cache.out_dims.iter().zip(&self.convs) {
            offsets.push(acc);
            acc += d.iter().product::<usize>() * conv.cout;
        }
        let mut g_next: Option<Tensor> = None;
        for i in (0..self.convs.len()).rev() {
            let conv = &self.convs[i];
            let len = cache.out_dims[i].iter().product::<usize>() * conv.cout;
            let mut gp = Tensor {
                dims: cache.out_dims[i],
                c: conv.cout,
                data: g_feats[offsets[i]..offsets[i] + len].to_vec(),
            };
            if let Some(gn) = g_next.take() {
                gp.add_assign(&gn);
            }
            let g_act = avg_pool_backward(cache.pre_act[i].dims, cache.factors[i], &gp);
            let g_pre = silu_backward(&cache.pre_act[i], &g_act);
            g_next = conv.backward(&self.params, &cache.stage_in[i], &g_pre, &mut scratch, true);
        }
        g_next.expect("at least one stage")
    }
}
